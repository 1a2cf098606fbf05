"""Optimization loop, learning-rate schedule, and checkpoints."""

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from ._validation import check_same_shape
from .clipfrontend import FrontendConfig, get_frontend
from .errors import ArgumentError, ConfigurationError, DimensionError, TrainingError
from .reconstructor import SCALE, ModelConfig, TextRSIRNet, images_to_tensor

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 4
    base_lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    crop_size: int = 0
    device: str = "cpu"

    def validate(self):
        if isinstance(self.epochs, bool) or int(self.epochs) != self.epochs or self.epochs < 1:
            raise ArgumentError(f"epochs must be a positive integer, got {self.epochs}")
        if self.batch_size < 1:
            raise ArgumentError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.base_lr > 0:
            raise ArgumentError(f"base_lr must be > 0, got {self.base_lr}")
        if self.weight_decay < 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ArgumentError("weight_decay must be >= 0 and betas in [0, 1)")
        if self.crop_size < 0 or self.crop_size % SCALE:
            raise ArgumentError(f"crop_size must be 0 (off) or a positive multiple of {SCALE}")
        return self

    @classmethod
    def for_dataset(cls, name, **overrides):
        """Defaults for a named benchmark profile (see ``DATASET_PROFILES``)."""
        key = name.lower().replace("-", "").replace("_", "").replace(" ", "")
        if key not in DATASET_PROFILES:
            raise ArgumentError(f"unknown dataset profile {name!r} (expected one of {', '.join(DATASET_PROFILES)})")
        return cls(**{**DATASET_PROFILES[key], **overrides})


# reference schedules for a limited compute budget
DATASET_PROFILES = {
    "alsat2b": {"epochs": 50, "batch_size": 4},
    "ucmerced": {"epochs": 100, "batch_size": 4},
    "aid": {"epochs": 20, "batch_size": 1},
    "ilsvrc2012": {"epochs": 20, "batch_size": 4},
}


@dataclass
class TrainingSample:
    id: str
    clr: np.ndarray
    hr: np.ndarray
    caption: str = ""
    class_label: str = ""


@dataclass
class TrainResult:
    checkpoint: dict
    loss_trace: list = field(default_factory=list)

    def write_trace(self, path):
        write_loss_trace(path, self.loss_trace)


def l1_loss(pred, target):
    """Mean absolute error over every sample, channel and pixel."""
    if isinstance(pred, torch.Tensor):
        if pred.shape != target.shape:
            raise DimensionError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
        return (pred - target).abs().mean()
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    check_same_shape(pred, target)
    return float(np.mean(np.abs(pred - target)))


def lr_schedule(step, total_steps, base_lr):
    """Constant ``base_lr``, halved from step ``total_steps // 2`` onwards."""
    if not 0 <= step < total_steps:
        raise ArgumentError(f"step {step} outside [0, {total_steps})")
    return base_lr if step < total_steps // 2 else base_lr / 2


def write_loss_trace(path, trace):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss"])
        for step, lr, loss in trace:
            writer.writerow([step, repr(lr), repr(loss)])


def read_loss_trace(path):
    with open(path, newline="") as fh:
        return [(int(r["step"]), float(r["lr"]), float(r["loss"])) for r in csv.DictReader(fh)]


def _clip_inputs(frontend, clrs, captions):
    v0, v_rm = frontend.encode_images(clrs)
    T = frontend.encode_texts(captions)
    return v0, v_rm, T


def _random_crop(sample, crop, gen):
    lr_crop = crop // SCALE
    h, w = sample.clr.shape[:2]
    if lr_crop > h or lr_crop > w:
        raise DimensionError(f"crop {crop} larger than HR image of {sample.id}")
    top = int(torch.randint(0, h - lr_crop + 1, (1,), generator=gen))
    left = int(torch.randint(0, w - lr_crop + 1, (1,), generator=gen))
    clr = sample.clr[top : top + lr_crop, left : left + lr_crop]
    hr = sample.hr[top * SCALE : (top + lr_crop) * SCALE, left * SCALE : (left + lr_crop) * SCALE]
    return clr, hr


def train(net, frontend, samples, config=None, log_every=0):
    """Fit ``net`` with L1 loss and AdamW; the CLIP frontend stays frozen.

    Returns a :class:`TrainResult` holding the final checkpoint dict and the
    ``(step, lr, loss)`` trace.
    """
    cfg = (config or TrainConfig()).validate()
    if not samples:
        raise ArgumentError("no training samples")
    for s in samples:
        if s.hr.shape[:2] != (s.clr.shape[0] * SCALE, s.clr.shape[1] * SCALE):
            raise DimensionError(f"{s.id}: HR {s.hr.shape[:2]} is not x{SCALE} of CLR {s.clr.shape[:2]}")

    device = torch.device(cfg.device)
    dtype = next(net.parameters()).dtype
    net.to(device).train()
    params = [p for p in net.parameters() if p.requires_grad]
    optimizer = None
    if params:
        optimizer = torch.optim.AdamW(
            params, lr=cfg.base_lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay
        )

    gen = torch.Generator().manual_seed(cfg.seed)
    cached = None
    if not cfg.crop_size:
        # frozen encoders: embeddings of uncropped inputs never change
        v0, v_rm, T = _clip_inputs(frontend, [s.clr for s in samples], [s.caption for s in samples])
        cached = (
            images_to_tensor([s.clr for s in samples], dtype).to(device),
            images_to_tensor([s.hr for s in samples], dtype).to(device),
            v0.to(device, dtype),
            v_rm.to(device, dtype),
            T.to(device, dtype),
        )

    n = len(samples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    trace = []
    step = 0
    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=gen)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if cached is not None:
                clr, hr, v0, v_rm, T = (t[idx] for t in cached)
            else:
                pairs = [_random_crop(samples[i], cfg.crop_size, gen) for i in idx.tolist()]
                clrs = [p[0] for p in pairs]
                v0, v_rm, T = _clip_inputs(frontend, clrs, [samples[i].caption for i in idx.tolist()])
                clr = images_to_tensor(clrs, dtype).to(device)
                hr = images_to_tensor([p[1] for p in pairs], dtype).to(device)
                v0, v_rm, T = v0.to(device, dtype), v_rm.to(device, dtype), T.to(device, dtype)

            lr = lr_schedule(step, total, cfg.base_lr)
            loss = l1_loss(net(clr, v0, v_rm, T), hr)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss.item()} at step {step} (epoch {epoch}, lr {lr})"
                )
            if optimizer is not None:
                for group in optimizer.param_groups:
                    group["lr"] = lr
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
            trace.append((step, lr, loss.item()))
            if log_every and step % log_every == 0:
                log.info("step %d lr %.3g loss %.6f", step, lr, loss.item())
            step += 1

    net.eval()
    checkpoint = make_checkpoint(net, frontend.config, cfg, optimizer, step)
    return TrainResult(checkpoint, trace)


def make_checkpoint(net, frontend_config, train_config=None, optimizer=None, step=0):
    return {
        "format_version": CHECKPOINT_VERSION,
        "model_state": {k: v.detach().clone() for k, v in net.state_dict().items()},
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "step": step,
        "model_config": net.config.to_dict(),
        "train_config": asdict(train_config) if train_config is not None else None,
        "frontend_config": asdict(frontend_config),
        "clip_dim": net.clip_dim,
    }


def save_checkpoint(path, checkpoint):
    torch.save(checkpoint, path)


def load_checkpoint(path_or_dict):
    """Rebuild ``(net, frontend)`` from a checkpoint file or dict."""
    ckpt = path_or_dict
    if not isinstance(ckpt, dict):
        try:
            ckpt = torch.load(path_or_dict, map_location="cpu", weights_only=False)
        except Exception as exc:
            raise ConfigurationError(f"cannot read checkpoint {path_or_dict}: {exc}") from exc
    version = ckpt.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint format version {version!r}")
    net = TextRSIRNet(ModelConfig(**ckpt["model_config"]), ckpt["clip_dim"])
    dtype = next(iter(ckpt["model_state"].values())).dtype
    try:
        net.to(dtype).load_state_dict(ckpt["model_state"])
    except RuntimeError as exc:
        raise ConfigurationError(f"checkpoint weights do not match the model: {exc}") from exc
    net.eval()
    frontend = get_frontend(FrontendConfig(**ckpt["frontend_config"]))
    return net, frontend
