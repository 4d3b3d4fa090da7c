"""Differentiable compute core.

Tensors and reverse-mode gradients come from torch's autograd tape. This
module adds the project's contracts on top: shape errors that name both
operands, a reverse pass that writes gradients into named parameters
(zero for unreached ones), a functional Adam step, and a central-difference
gradient checker that never touches autograd on its numeric side.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .rng import numpy_rng


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


def set_precision(precision: str) -> torch.dtype:
    """Select the default floating dtype: ``"double"`` for checks, ``"single"`` for training."""
    dtype = {"double": torch.float64, "single": torch.float32}[precision]
    torch.set_default_dtype(dtype)
    return dtype


def check_finite(x: torch.Tensor, where: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"non-finite values in {where}")
    return x


# ---------------------------------------------------------------------------
# Core ops. Backward rules are autograd's; the wrappers pin the shape contract.
# ---------------------------------------------------------------------------


def _shape(x) -> tuple:
    return tuple(x.shape)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions differ, {_shape(a)} @ {_shape(b)}")
    try:
        return torch.matmul(a, b)
    except RuntimeError as exc:
        raise ShapeError(f"matmul: incompatible shapes {_shape(a)} and {_shape(b)}") from exc


def _broadcast(name: str, a, b):
    try:
        torch.broadcast_shapes(_shape(a), _shape(b))
    except RuntimeError as exc:
        raise ShapeError(f"{name}: cannot broadcast {_shape(a)} with {_shape(b)}") from exc


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast("add", a, b)
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast("mul", a, b)
    return a * b


def conv1d(x, weight, bias=None, stride: int = 1, padding: int = 0, dilation: int = 1, groups: int = 1):
    """``x`` is [batch, in_channels, time]; ``weight`` is [out, in / groups, kernel]."""
    if x.dim() != 3 or weight.dim() != 3 or x.shape[1] != weight.shape[1] * groups:
        raise ShapeError(f"conv1d: input {_shape(x)} does not match weight {_shape(weight)} (groups={groups})")
    if bias is not None and _shape(bias) != (weight.shape[0],):
        raise ShapeError(f"conv1d: bias {_shape(bias)} does not match weight {_shape(weight)}")
    return F.conv1d(x, weight, bias, stride=stride, padding=padding, dilation=dilation, groups=groups)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


def layer_norm(x: torch.Tensor, weight=None, bias=None, eps: float = 1e-5) -> torch.Tensor:
    d = x.shape[-1]
    for name, p in (("weight", weight), ("bias", bias)):
        if p is not None and _shape(p) != (d,):
            raise ShapeError(f"layer_norm: {name} {_shape(p)} does not match input {_shape(x)}")
    return F.layer_norm(x, (d,), weight, bias, eps)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def embedding_lookup(table: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    if table.dim() != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {_shape(table)}")
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: ids outside [0, {table.shape[0]}) for table {_shape(table)}")
    return F.embedding(ids, table)


def concat(xs: list[torch.Tensor], dim: int = -1) -> torch.Tensor:
    ref = xs[0]
    nd = ref.dim()
    axis = dim % nd
    for other in xs[1:]:
        if other.dim() != nd or any(other.shape[i] != ref.shape[i] for i in range(nd) if i != axis):
            raise ShapeError(f"concat along {dim}: {_shape(ref)} vs {_shape(other)}")
    return torch.cat(xs, dim=dim)


def mean(x: torch.Tensor, dim=None, keepdim: bool = False) -> torch.Tensor:
    return x.mean() if dim is None else x.mean(dim=dim, keepdim=keepdim)


def variance(x: torch.Tensor, dim=None, keepdim: bool = False) -> torch.Tensor:
    """Population variance (divides by N)."""
    if dim is None:
        return x.var(unbiased=False)
    return x.var(dim=dim, unbiased=False, keepdim=keepdim)


# ---------------------------------------------------------------------------
# Reverse pass and optimizer
# ---------------------------------------------------------------------------


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Write d(loss)/d(param) into ``param.grad`` for every named parameter.

    Parameters the loss does not depend on get an explicit zero gradient.
    """
    if loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {_shape(loss)}")
    names = list(params)
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    out = {}
    for name, p, g in zip(names, tensors, grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        p.grad = g
        out[name] = g
    return out


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adam_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``."""
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient {_shape(g)} does not match parameter {name} {_shape(p)}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        v = state.v[name]
        m.mul_(beta1).add_(g, alpha=1 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


class Adam:
    """Adam over a module's named, trainable parameters."""

    def __init__(self, module: torch.nn.Module, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, grad_clip: float | None = None):
        self.params = {n: p for n, p in module.named_parameters() if p.requires_grad}
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.state = AdamState()

    def step(self, loss: torch.Tensor, lr: float | None = None) -> float:
        grads = backward(loss, self.params)
        norm = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
        if self.grad_clip is not None and norm > self.grad_clip:
            scale = self.grad_clip / (norm + 1e-12)
            grads = {n: g * scale for n, g in grads.items()}
        adam_step(self.params, grads, self.state, self.lr if lr is None else lr, *self.betas, self.eps)
        return norm


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class BlockCheck:
    name: str
    max_rel_error: float
    n_checked: int
    passed: bool


@dataclass
class GradcheckReport:
    blocks: list[BlockCheck]
    rtol: float

    @property
    def passed(self) -> bool:
        return all(b.passed for b in self.blocks)

    @property
    def failures(self) -> list[str]:
        return [b.name for b in self.blocks if not b.passed]

    def __str__(self) -> str:
        lines = [f"{'block':<48} {'max_rel_err':>12} {'n':>5}  status"]
        for b in self.blocks:
            lines.append(f"{b.name:<48} {b.max_rel_error:12.3e} {b.n_checked:5d}  {'ok' if b.passed else 'FAIL'}")
        return "\n".join(lines)


def gradcheck(
    fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]],
    rtol: float = 1e-4,
    step: float = 1e-5,
    max_entries: int = 48,
    floor: float = 1e-4,
    seed: int = 0,
) -> GradcheckReport:
    """Compare autograd gradients of ``fn()`` with central differences.

    ``fn`` must be deterministic and read the tensors in ``params`` (which
    need ``requires_grad``). Blocks with more than ``max_entries`` entries are
    checked on a seeded random subset. The relative error of an entry is
    ``|a - n| / max(|a|, |n|, floor)``; the floor turns the test into an
    absolute one for gradients that are zero up to roundoff.
    """
    params = dict(params)
    for name, p in params.items():
        if p.dtype != torch.float64:
            raise ContractError(f"gradcheck needs double precision, {name} is {p.dtype}")
    names = list(params)
    loss = fn()
    if loss.numel() != 1:
        raise ContractError("gradcheck needs a scalar-valued function")
    analytic = torch.autograd.grad(loss.reshape(()), [params[n] for n in names], allow_unused=True)
    rng = numpy_rng(seed, "gradcheck")
    blocks = []
    for name, g in zip(names, analytic):
        p = params[name]
        g = torch.zeros_like(p) if g is None else g.detach()
        n = p.numel()
        idx = np.arange(n) if n <= max_entries else np.sort(rng.choice(n, max_entries, replace=False))
        flat = p.data.view(-1)
        worst = 0.0
        with torch.no_grad():
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + step
                fp = fn().item()
                flat[i] = orig - step
                fm = fn().item()
                flat[i] = orig
                num = (fp - fm) / (2 * step)
                ana = g.view(-1)[i].item()
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
        blocks.append(BlockCheck(name, worst, len(idx), worst <= rtol))
    return GradcheckReport(blocks, rtol)
