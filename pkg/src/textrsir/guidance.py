"""Semantic guidance maps from CLIP visual tokens.

A learnable global prior is conditioned on the class token, refined jointly
with ``l + 1`` learnable unit descriptors by one self-attention layer, and
gated into one latent ``e_i`` per alignment step. Each latent is compared to
every local token by cosine similarity, giving a coarse ``G x G`` map that is
bilinearly resized to the feature resolution.
"""

import torch
import torch.nn.functional as F
from torch import nn

from .clipfrontend import l2_normalize
from .errors import DimensionError


def _check_dim(t, d, name):
    if t.shape[-1] != d:
        raise DimensionError(f"{name} has last dimension {t.shape[-1]}, expected {d}")


class SemanticGuidance(nn.Module):
    """Produces ``num_steps = l + 1`` guidance maps per image.

    Parameters
    ----------
    d : int
        CLIP embedding dimension.
    num_sr_units : int
        ``l``; the module yields ``l + 1`` maps.
    num_heads : int
        Heads of the descriptor self-attention layer; must divide ``d``.
    """

    def __init__(self, d, num_sr_units, num_heads=4):
        super().__init__()
        if num_sr_units < 0:
            raise ValueError("num_sr_units must be >= 0")
        if d % num_heads:
            raise DimensionError(f"d={d} is not divisible by num_heads={num_heads}")
        self.d = d
        self.num_steps = num_sr_units + 1
        self.p0 = nn.Parameter(torch.empty(1, d))
        self.pb = nn.Parameter(torch.empty(self.num_steps, d))
        self.meta1 = nn.Linear(d, d)
        self.meta2 = nn.Linear(d, d)
        self.mhsa = nn.MultiheadAttention(d, num_heads, batch_first=True)
        self.mlp_a = nn.Linear(d, d)
        self.mlp_b = nn.Linear(d, d)
        self.mlp_e = nn.Linear(d, d)
        self.reset_parameters()

    def reset_parameters(self):
        std = self.d ** -0.5
        nn.init.normal_(self.p0, 0.0, std)
        nn.init.normal_(self.pb, 0.0, std)
        for lin in (self.meta1, self.meta2, self.mlp_a, self.mlp_b, self.mlp_e):
            nn.init.normal_(lin.weight, 0.0, std)
            nn.init.zeros_(lin.bias)
        nn.init.normal_(self.mhsa.in_proj_weight, 0.0, std)
        nn.init.zeros_(self.mhsa.in_proj_bias)
        nn.init.normal_(self.mhsa.out_proj.weight, 0.0, std)
        nn.init.zeros_(self.mhsa.out_proj.bias)

    def metanet(self, v0):
        """``p_a = p0 + A2 relu(A1 v0)``; ``v0`` is ``(B, d)``, result ``(B, 1, d)``."""
        _check_dim(v0, self.d, "v0")
        return self.p0 + self.meta2(F.relu(self.meta1(v0))).unsqueeze(1)

    def refine_descriptors(self, p_a, p_b=None):
        """One residual self-attention pass over ``[p_a; p_b]``."""
        if p_b is None:
            p_b = self.pb
        _check_dim(p_a, self.d, "p_a")
        _check_dim(p_b, self.d, "p_b")
        if p_b.dim() == 2:
            p_b = p_b.unsqueeze(0).expand(p_a.shape[0], -1, -1)
        tokens = torch.cat([p_a, p_b], dim=1)
        attended, _ = self.mhsa(tokens, tokens, tokens, need_weights=False)
        tokens = tokens + attended
        return tokens[:, :1], tokens[:, 1:]

    def fuse_latents(self, p_a_star, p_b_star):
        """``e = mlp_e(mlp_a(p_a*) * sigmoid(mlp_b(p_b*)))``, shape ``(B, l+1, d)``."""
        _check_dim(p_a_star, self.d, "p_a_star")
        _check_dim(p_b_star, self.d, "p_b_star")
        return self.mlp_e(self.mlp_a(p_a_star) * torch.sigmoid(self.mlp_b(p_b_star)))

    def latents(self, v0):
        p_a = self.metanet(v0)
        p_a_star, p_b_star = self.refine_descriptors(p_a)
        return self.fuse_latents(p_a_star, p_b_star)

    def forward(self, v0, v_rm, target_h, target_w):
        """Guidance stack of shape ``(B, l+1, target_h, target_w)`` in ``[-1, 1]``."""
        e = self.latents(v0)
        return guidance_maps(e, v_rm, target_h, target_w, num_steps=self.num_steps)


def cosine_maps(e, v_rm):
    """Raw cosine maps ``(B, S, G, G)`` between latents ``(B, S, d)`` and tokens ``(B, G, G, d)``."""
    if v_rm.dim() != 4:
        raise DimensionError(f"v_rm must be (B, G, G, d), got {tuple(v_rm.shape)}")
    if e.shape[-1] != v_rm.shape[-1]:
        raise DimensionError("latents and tokens disagree on d")
    return torch.einsum("bsd,bghd->bsgh", l2_normalize(e), l2_normalize(v_rm))


def guidance_maps(e, v_rm, target_h, target_w, num_steps=None):
    if num_steps is not None and e.shape[1] != num_steps:
        raise DimensionError(f"got {e.shape[1]} latents for {num_steps} steps")
    if target_h < 1 or target_w < 1:
        raise DimensionError("target size must be at least 1x1")
    raw = cosine_maps(e, v_rm)
    if raw.shape[-2:] != (target_h, target_w):
        raw = F.interpolate(raw, size=(target_h, target_w), mode="bilinear", align_corners=False)
    return raw.clamp(-1.0, 1.0)

