"""The text-guided reconstruction network.

Data flow for a CLR image ``L`` with caption embedding ``T`` and guidance
stack ``S_0..S_l``::

    X_0 = conv3x3(L)
    X_{i+1} = unit_i(tgfa(X_i, TG(T), S_i, alpha_i))      i = 0 .. l-1
    X = tgfa(X_l, TG(T), S_l, alpha_l)
    out = decode(X, X_0)  [+ bicubic(L) when global_skip]
"""

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, DimensionError
from .guidance import SemanticGuidance
from .imagecore import _resample_matrix

SCALE = 4
SR_UNIT_KINDS = ("token_selective", "residual_conv")


@dataclass
class ModelConfig:
    channels: int = 64
    num_sr_units: int = 6
    scale: int = SCALE
    sr_unit_kind: str = "token_selective"
    alpha_init: float = 0.5
    hierarchy: bool = True
    use_sgm: bool = True
    use_te: bool = True
    learnable_alpha: bool = True
    global_skip: bool = True
    window_size: int = 8
    guidance_heads: int = 4
    seed: int = 0

    def validate(self):
        if self.num_sr_units < 0:
            raise ConfigurationError("num_sr_units must be >= 0")
        if self.channels < 1:
            raise ConfigurationError("channels must be >= 1")
        if self.scale != SCALE:
            raise ConfigurationError(f"only x{SCALE} reconstruction is supported")
        if self.sr_unit_kind not in SR_UNIT_KINDS:
            raise ConfigurationError(f"unknown sr_unit_kind {self.sr_unit_kind!r}")
        if not 0.0 <= self.alpha_init <= 1.0:
            raise ConfigurationError("alpha_init must lie in [0, 1]")
        return self

    def to_dict(self):
        return asdict(self)


# ------------------------------------------------------------- conversions


def images_to_tensor(images, dtype=torch.float32):
    arr = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    return torch.from_numpy(arr.transpose(0, 3, 1, 2).copy()).to(dtype)


def tensor_to_images(t):
    arr = t.detach().to(torch.float64).cpu().numpy().transpose(0, 2, 3, 1)
    return [np.ascontiguousarray(a) for a in arr]


def bicubic_upsample_tensor(x, factor=SCALE):
    """Same a=-0.5 kernel as :func:`imagecore.upsample_bicubic`, batched and clamped."""
    h, w = x.shape[-2:]
    rows = torch.from_numpy(_resample_matrix(h, h * factor)).to(x.dtype)
    cols = torch.from_numpy(_resample_matrix(w, w * factor)).to(x.dtype)
    return torch.einsum("ih,bchw,jw->bcij", rows, x, cols).clamp(0.0, 1.0)


# ------------------------------------------------------------- encoder / gate


class CnnEncoder(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(3, channels, 3, padding=1)

    def forward(self, clr):
        return self.conv(clr)


class TextGate(nn.Module):
    """``sigmoid(W2 relu(W1 T))``: projects a text embedding to per-channel gates."""

    def __init__(self, d, channels):
        super().__init__()
        self.d = d
        self.fc1 = nn.Linear(d, d)
        self.fc2 = nn.Linear(d, channels)

    def forward(self, T):
        if T.shape[-1] != self.d:
            raise DimensionError(f"text embedding has dim {T.shape[-1]}, gate expects {self.d}")
        return torch.sigmoid(self.fc2(F.relu(self.fc1(T))))


def tgfa(X, gate, S, alpha):
    """Text-guided feature alignment.

    ``X`` is ``(B, C, H, W)``, ``gate`` is ``(B, C)``, ``S`` is ``(B, H, W)``
    (broadcast over channels); returns ``alpha * (X * gate + S) + (1 - alpha) * X``.
    """
    if gate.dim() != 2 or gate.shape != X.shape[:2]:
        raise DimensionError(f"gate shape {tuple(gate.shape)} does not match features {tuple(X.shape)}")
    if S.shape != (X.shape[0],) + tuple(X.shape[2:]):
        raise DimensionError(f"guidance shape {tuple(S.shape)} does not match features {tuple(X.shape)}")
    aligned = X * gate[:, :, None, None] + S[:, None]
    # affine form: exact identity when alpha == 0 or when aligned == X
    return X + alpha * (aligned - X)


# ------------------------------------------------------------- SR units


class ResidualConvUnit(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


def topk_window_attention(q, k, v, keep):
    """Softmax attention where each query row only sees its ``keep`` best keys.

    Ties in score are resolved in favour of the lower key index. Returns the
    attended values and the (sparse) attention weights.
    """
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    n = scores.shape[-1]
    keep = max(1, min(keep, n))
    if keep < n:
        order = torch.sort(scores.detach(), dim=-1, descending=True, stable=True).indices
        mask = torch.zeros_like(scores, dtype=torch.bool)
        mask.scatter_(-1, order[..., :keep], True)
        scores = scores.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    return weights @ v, weights


def _pad_to_multiple(x, window):
    h, w = x.shape[-2:]
    ph, pw = (-h) % window, (-w) % window
    if not (ph or pw):
        return x
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode)


class TokenSelectiveUnit(nn.Module):
    """Window self-attention with top-k token selection, then a feed-forward layer.

    Both branches are residual with zero-initialized output projections, so a
    fresh unit is the identity map.
    """

    def __init__(self, channels, window_size=8, mlp_ratio=2):
        super().__init__()
        self.window = window_size
        self.keep = (window_size * window_size) // 2
        self.norm1 = nn.LayerNorm(channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)
        self.norm2 = nn.LayerNorm(channels)
        self.fc1 = nn.Linear(channels, mlp_ratio * channels)
        self.fc2 = nn.Linear(mlp_ratio * channels, channels)
        for lin in (self.proj, self.fc2):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, x):
        b, c, h, w = x.shape
        ws = self.window
        xp = _pad_to_multiple(x, ws)
        hp, wp = xp.shape[-2:]
        # (B, C, H, W) -> (B * nWin, ws*ws, C)
        t = xp.reshape(b, c, hp // ws, ws, wp // ws, ws).permute(0, 2, 4, 3, 5, 1)
        t = t.reshape(-1, ws * ws, c)
        q, k, v = self.qkv(self.norm1(t)).chunk(3, dim=-1)
        attended, _ = topk_window_attention(q, k, v, self.keep)
        t = t + self.proj(attended)
        t = t + self.fc2(F.gelu(self.fc1(self.norm2(t))))
        t = t.reshape(b, hp // ws, wp // ws, ws, ws, c).permute(0, 5, 1, 3, 2, 4)
        return t.reshape(b, c, hp, wp)[:, :, :h, :w]


def make_sr_unit(kind, channels, window_size=8):
    if kind == "residual_conv":
        return ResidualConvUnit(channels)
    if kind == "token_selective":
        return TokenSelectiveUnit(channels, window_size)
    raise ConfigurationError(f"unknown sr_unit_kind {kind!r}")


def tgisr(X0, gate, S_stack, alphas, units, hierarchy=True, use_sgm=True, use_te=True):
    """Iterate alignment and refinement; ``S_stack`` is ``(B, l+1, H, W)``."""
    l = len(units)
    if S_stack.shape[1] != l + 1 or len(alphas) != l + 1:
        raise ConfigurationError(
            f"{len(units)} SR units need {l + 1} guidance maps and factors, "
            f"got {S_stack.shape[1]} and {len(alphas)}"
        )
    if not use_te:
        gate = torch.ones_like(gate)
    if not use_sgm:
        S_stack = torch.zeros_like(S_stack)

    def align(X, i):
        if not hierarchy and i > 0:
            return X
        return tgfa(X, gate, S_stack[:, i], alphas[i])

    X = X0
    for i, unit in enumerate(units):
        X = unit(align(X, i))
    return align(X, l)


# ------------------------------------------------------------- decoder


class Decoder(nn.Module):
    """Residual fusion with the shallow feature, then two conv + pixelshuffle(x2) stages.

    The output convolution starts at zero so that, with ``global_skip``, an
    untrained network reproduces the bicubic upsampling of its input.
    """

    def __init__(self, channels):
        super().__init__()
        self.body = nn.Conv2d(channels, channels, 3, padding=1)
        self.up1 = nn.Conv2d(channels, 4 * channels, 3, padding=1)
        self.up2 = nn.Conv2d(channels, 4 * channels, 3, padding=1)
        self.shuffle = nn.PixelShuffle(2)
        self.out = nn.Conv2d(channels, 3, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def residual(self, X, shallow):
        if X.shape != shallow.shape:
            raise DimensionError(f"feature {tuple(X.shape)} vs shallow {tuple(shallow.shape)}")
        f = self.body(X) + shallow
        f = self.shuffle(self.up1(f))
        f = self.shuffle(self.up2(f))
        return self.out(f)

    def forward(self, X, shallow):
        return self.residual(X, shallow).clamp(0.0, 1.0)


# ------------------------------------------------------------- full network


class TextRSIRNet(nn.Module):
    """Trainable part of the reconstructor; CLIP outputs are passed in precomputed."""

    def __init__(self, config, clip_dim):
        super().__init__()
        config = config.validate()
        self.config = config
        self.clip_dim = clip_dim
        rng_state = torch.random.get_rng_state()
        try:
            torch.manual_seed(config.seed)
            c, l = config.channels, config.num_sr_units
            heads = config.guidance_heads if clip_dim % config.guidance_heads == 0 else 1
            self.encoder = CnnEncoder(c)
            self.guidance = SemanticGuidance(clip_dim, l, num_heads=heads)
            self.text_gate = TextGate(clip_dim, c)
            self.units = nn.ModuleList(
                make_sr_unit(config.sr_unit_kind, c, config.window_size) for _ in range(l)
            )
            self.decoder = Decoder(c)
        finally:
            torch.random.set_rng_state(rng_state)
        alphas = torch.full((l + 1,), float(config.alpha_init))
        if config.learnable_alpha:
            self.alphas = nn.Parameter(alphas)
        else:
            self.register_buffer("alphas", alphas)

    def features(self, clr, v0, v_rm, T):
        X0 = self.encoder(clr)
        h, w = clr.shape[-2:]
        S = self.guidance(v0, v_rm, h, w)
        gate = self.text_gate(T)
        cfg = self.config
        X = tgisr(X0, gate, S, self.alphas, self.units, cfg.hierarchy, cfg.use_sgm, cfg.use_te)
        return X, X0

    def forward(self, clr, v0, v_rm, T):
        """``clr`` is ``(B, 3, h, w)``; returns ``(B, 3, 4h, 4w)`` in ``[0, 1]``."""
        X, X0 = self.features(clr, v0, v_rm, T)
        if not self.config.global_skip:
            return self.decoder(X, X0)
        return (self.decoder.residual(X, X0) + bicubic_upsample_tensor(clr, SCALE)).clamp(0.0, 1.0)

    def zero_final_projections(self):
        """Zero the last layer of every residual branch and of the decoder."""
        for unit in self.units:
            for lin in (getattr(unit, "conv2", None), getattr(unit, "proj", None), getattr(unit, "fc2", None)):
                if lin is not None:
                    nn.init.zeros_(lin.weight)
                    nn.init.zeros_(lin.bias)
        nn.init.zeros_(self.decoder.out.weight)
        nn.init.zeros_(self.decoder.out.bias)
        return self


@torch.no_grad()
def reconstruct(net, frontend, clr_images, captions):
    """Full pipeline on numpy images: CLIP encoding, guidance, TGISR, decoding."""
    if len(clr_images) != len(captions):
        raise DimensionError(f"{len(clr_images)} images but {len(captions)} captions")
    if not clr_images:
        return []
    net.eval()
    dtype = next(net.parameters()).dtype
    v0, v_rm = frontend.encode_images(clr_images)
    T = frontend.encode_texts(captions)
    # group equal-sized inputs so each forward sees a dense batch
    by_shape = {}
    for i, im in enumerate(clr_images):
        by_shape.setdefault(np.shape(im), []).append(i)
    result = [None] * len(clr_images)
    for idx in by_shape.values():
        clr = images_to_tensor([clr_images[i] for i in idx], dtype)
        out = net(clr, v0[idx].to(dtype), v_rm[idx].to(dtype), T[idx].to(dtype))
        for i, im in zip(idx, tensor_to_images(out)):
            result[i] = im
    return result
