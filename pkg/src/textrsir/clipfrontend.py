"""Frozen CLIP image/text encoders.

Backends are addressed by an identifier string:

``tiny-random`` (default)
    A small ViT-B/32-shaped CLIP (224 px input, 7x7 token grid) whose weights
    come from a fixed seed. Needs no downloads, so the whole pipeline runs
    offline on a CPU.
``open_clip:<model>[:<pretrained tag>]``
    Any open_clip architecture, e.g. ``open_clip:ViT-B-32:openai``. Weights are
    looked up under ``$TEXTRSIR_WEIGHTS_DIR`` (or open_clip's own cache).
``open_clip-file:<model>:<path>``
    An open_clip architecture with weights loaded from a local checkpoint file.

Local tokens are passed through the same output projection as the class
token, so ``v0``, ``v_rm`` and the text embedding all share dimension ``d``.
"""

import os
import threading
from dataclasses import dataclass

import numpy as np
import torch

from ._validation import check_rgb_image
from .errors import ConfigurationError
from .imagecore import resize_bicubic

WEIGHTS_ENV = "TEXTRSIR_WEIGHTS_DIR"

# published CLIP preprocessing statistics
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)

_TINY_CFG = dict(
    embed_dim=64,
    vision_cfg=dict(image_size=224, layers=2, width=64, head_width=32, patch_size=32),
    text_cfg=dict(context_length=77, vocab_size=49408, width=64, heads=2, layers=2),
)


@dataclass(frozen=True)
class FrontendConfig:
    backend_id: str = "tiny-random"
    input_side: int = 224
    seed: int = 0


@dataclass
class ClipVisualTokens:
    """Global token ``v0`` of shape (d,) and local tokens ``v_rm`` of shape (G, G, d)."""

    v0: np.ndarray
    v_rm: np.ndarray

    @property
    def d(self):
        return self.v0.shape[-1]

    @property
    def grid(self):
        return self.v_rm.shape[0]


@dataclass
class TextEmbedding:
    T: np.ndarray
    source_caption: str


def l2_normalize(v, epsilon=1e-12, axis=-1):
    """Scale ``v`` to unit length along ``axis``; zero vectors stay zero.

    Works on numpy arrays and torch tensors alike.
    """
    if isinstance(v, torch.Tensor):
        norm = torch.linalg.vector_norm(v, dim=axis, keepdim=True)
        return v / norm.clamp_min(epsilon)
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    return v / np.maximum(norm, epsilon)


def canonical_caption(text):
    return " ".join(str(text).split())


class ClipFrontend:
    """Wraps a frozen CLIP model and exposes ``encode_image``/``encode_text``."""

    def __init__(self, config=None):
        self.config = config or FrontendConfig()
        self._lock = threading.Lock()
        self._model = None
        self._tokenizer = None

    # one-time exclusive initialization; encoders are read-only afterwards
    def _ensure_loaded(self):
        if self._model is not None:
            return
        with self._lock:
            if self._model is None:
                model, tokenizer = _build_backend(self.config)
                model.eval()
                for p in model.parameters():
                    p.requires_grad_(False)
                self._tokenizer = tokenizer
                self._model = model

    @property
    def model(self):
        self._ensure_loaded()
        return self._model

    def parameters(self):
        return self.model.parameters()

    @property
    def d(self):
        return int(self.model.visual.proj.shape[1])

    @property
    def grid(self):
        g = self.model.visual.grid_size
        return int(g[0])

    def _pixel_tensor(self, images):
        side = self.config.input_side
        mean = np.asarray(CLIP_MEAN)
        std = np.asarray(CLIP_STD)
        batch = []
        for img in images:
            img = check_rgb_image(img)
            if img.shape[:2] != (side, side):
                img = resize_bicubic(img, side, side)
            batch.append(((img - mean) / std).transpose(2, 0, 1))
        return torch.from_numpy(np.stack(batch)).float()

    @torch.no_grad()
    def encode_images(self, images):
        """Batch version of :meth:`encode_image`; returns ``(v0, v_rm)`` tensors.

        ``v0`` is ``(B, d)`` and ``v_rm`` is ``(B, G, G, d)`` in row-major token order.
        """
        visual = self.model.visual
        x = self._pixel_tensor(images)
        prev = visual.output_tokens
        visual.output_tokens = True
        try:
            pooled, tokens = visual(x)
        finally:
            visual.output_tokens = prev
        if visual.proj is not None:
            tokens = tokens @ visual.proj
        g = self.grid
        if tokens.shape[1] != g * g:
            raise ConfigurationError(
                f"backend produced {tokens.shape[1]} local tokens, expected {g * g}"
            )
        return pooled, tokens.reshape(len(images), g, g, -1)

    def encode_image(self, img):
        v0, v_rm = self.encode_images([img])
        return ClipVisualTokens(v0[0].double().numpy(), v_rm[0].double().numpy())

    @torch.no_grad()
    def encode_texts(self, captions):
        self._ensure_loaded()
        tokens = self._tokenizer([canonical_caption(c) for c in captions])
        return self.model.encode_text(tokens)

    def encode_text(self, caption):
        T = self.encode_texts([caption])[0]
        return TextEmbedding(T.double().numpy(), caption)

    def state_bytes(self):
        """Concatenated raw bytes of every encoder parameter, for freeze checks."""
        return b"".join(
            t.detach().cpu().numpy().tobytes() for t in self.model.state_dict().values()
        )


def _build_backend(cfg):
    try:
        import open_clip
    except ImportError as exc:  # pragma: no cover
        raise ConfigurationError("open_clip_torch is required for CLIP backends") from exc

    backend = cfg.backend_id
    if backend == "tiny-random":
        state = torch.random.get_rng_state()
        try:
            torch.manual_seed(cfg.seed)
            model = open_clip.CLIP(**_TINY_CFG)
        finally:
            torch.random.set_rng_state(state)
        tokenizer = open_clip.get_tokenizer("ViT-B-32")
    elif backend.startswith("open_clip:"):
        parts = backend.split(":")
        name = parts[1]
        tag = parts[2] if len(parts) > 2 else None
        try:
            model = open_clip.create_model(
                name, pretrained=tag, cache_dir=os.environ.get(WEIGHTS_ENV)
            )
        except Exception as exc:
            raise ConfigurationError(f"cannot load CLIP backend {backend!r}: {exc}") from exc
        tokenizer = open_clip.get_tokenizer(name)
    elif backend.startswith("open_clip-file:"):
        _, name, path = backend.split(":", 2)
        if not os.path.exists(path):
            raise ConfigurationError(f"CLIP weight file not found: {path}")
        try:
            model = open_clip.create_model(name, pretrained=path)
        except Exception as exc:
            raise ConfigurationError(f"weights at {path} do not match {name}: {exc}") from exc
        tokenizer = open_clip.get_tokenizer(name)
    else:
        raise ConfigurationError(f"unknown CLIP backend {backend!r}")

    visual = model.visual
    if not hasattr(visual, "grid_size"):
        raise ConfigurationError(f"backend {backend!r} is not a ViT; no token grid")
    if cfg.input_side != visual.image_size[0]:
        raise ConfigurationError(
            f"input_side {cfg.input_side} does not match backend input {visual.image_size[0]}"
        )
    return model, tokenizer


_FRONTENDS = {}
_FRONTENDS_LOCK = threading.Lock()


def get_frontend(config=None):
    """Shared, lazily built frontend per configuration."""
    config = config or FrontendConfig()
    with _FRONTENDS_LOCK:
        if config not in _FRONTENDS:
            _FRONTENDS[config] = ClipFrontend(config)
        return _FRONTENDS[config]
