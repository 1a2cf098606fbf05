"""Central finite-difference checks of autograd gradients at float64.

Each registered operation builds a small random instance and a scalar
objective ``sum(op(...) * R)`` with a fixed random projection ``R``. Every
input element and every parameter is perturbed by ``+/-h`` and the resulting
numeric derivative compared with the analytic one.
"""

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ArgumentError
from .guidance import SemanticGuidance
from .reconstructor import Decoder, ResidualConvUnit, TextGate, tgfa
from .trainer import l1_loss

STEP = 1e-5
# denominators below this are treated as absolute errors
REL_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    op: str
    max_rel_error: float
    n_checked: int
    tolerance: float = None

    @property
    def passed(self):
        return self.tolerance is None or self.max_rel_error < self.tolerance


def _rand(gen, *shape, low=-1.0, high=1.0):
    return torch.rand(tuple(shape), generator=gen, dtype=torch.float64) * (high - low) + low


def _module_params(module, gen, scale=None):
    module.double()
    for p in module.parameters():
        with torch.no_grad():
            s = scale if scale is not None else 1.0 / max(1, p.shape[-1]) ** 0.5
            p.copy_(_rand(gen, *p.shape) * s)
    return list(module.parameters())


def _case_tgfa(gen, size):
    c, h, w = size.get("channels", 1), size.get("height", 2), size.get("width", 2)
    inputs = [
        _rand(gen, 1, c, h, w),
        _rand(gen, 1, c, low=0.1, high=0.9),
        _rand(gen, 1, h, w),
        _rand(gen, 1, low=0.1, high=0.9)[0],
    ]
    return (lambda X, g, S, a: tgfa(X, g, S, a)), inputs, []


def _case_text_gate(gen, size):
    d, c = size.get("d", 4), size.get("channels", 2)
    gate = TextGate(d, c)
    params = _module_params(gate, gen)
    return gate, [_rand(gen, 1, d)], params


def _case_guidance(gen, size):
    d, l, g = size.get("d", 4), size.get("num_sr_units", 2), size.get("grid", 2)
    h, w = size.get("height", 4), size.get("width", 4)
    sg = SemanticGuidance(d, l, num_heads=2 if d % 2 == 0 else 1)
    params = _module_params(sg, gen)

    def chain(v0, v_rm):
        return sg(v0, v_rm, h, w)

    return chain, [_rand(gen, 1, d), _rand(gen, 1, g, g, d)], params


def _case_decode(gen, size):
    c, h, w = size.get("channels", 2), size.get("height", 4), size.get("width", 4)
    dec = Decoder(c)
    params = _module_params(dec, gen, scale=0.1)
    with torch.no_grad():
        dec.out.bias.fill_(0.5)  # keep outputs clear of the [0, 1] clamp

    return dec, [_rand(gen, 1, c, h, w), _rand(gen, 1, c, h, w)], params


def _case_l1(gen, size):
    shape = (1, 3, size.get("height", 4), size.get("width", 4))
    target = _rand(gen, *shape)
    offset = _rand(gen, *shape, low=0.1, high=0.5) * torch.where(_rand(gen, *shape) > 0, 1.0, -1.0)
    return (lambda pred, t: l1_loss(pred, t)), [target + offset, target], []


def _case_residual_conv(gen, size):
    c, h, w = size.get("channels", 2), size.get("height", 4), size.get("width", 4)
    unit = ResidualConvUnit(c)
    params = _module_params(unit, gen)
    return unit, [_rand(gen, 1, c, h, w)], params


REGISTRY = {
    "tgfa": _case_tgfa,
    "text_gate": _case_text_gate,
    "guidance": _case_guidance,
    "decode": _case_decode,
    "l1_loss": _case_l1,
    "residual_conv": _case_residual_conv,
}


def grad_check(op, size=None, tolerance=None, seed=0, h=STEP):
    """Max relative error between autograd and central differences for ``op``."""
    if op not in REGISTRY:
        raise ArgumentError(f"no differentiable operation registered as {op!r}")
    gen = torch.Generator().manual_seed(seed)
    fn, inputs, params = REGISTRY[op](gen, dict(size or {}))
    if isinstance(fn, nn.Module):
        fn.eval()
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    with torch.no_grad():
        proj = _rand(gen, *fn(*inputs).shape)

    def objective():
        return (fn(*inputs) * proj).sum()

    leaves = inputs + params
    analytic = torch.autograd.grad(objective(), leaves)

    worst, count = 0.0, 0
    with torch.no_grad():
        for leaf, grad in zip(leaves, analytic):
            flat, gflat = leaf.view(-1), grad.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = objective().item()
                flat[i] = orig - h
                down = objective().item()
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                a = gflat[i].item()
                denom = max(abs(a), abs(numeric), REL_FLOOR)
                worst = max(worst, abs(a - numeric) / denom)
                count += 1
    return GradCheckResult(op, worst, count, tolerance)
