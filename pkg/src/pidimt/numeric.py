"""Dense numerical kernels with reverse-mode gradients.

Arrays are ``torch.Tensor`` values and the gradient tape is torch autograd.
This module pins the small set of primitives the model is built from and
gives them explicit dtype handling, shape errors and a finite-difference
gradient checker that is independent of the tape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DTYPES = {"f32": torch.float32, "f64": torch.float64}


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ValueError):
    """A scalar parameter is outside its valid range."""


class EvaluationError(RuntimeError):
    """A function evaluated to a non-finite value."""


def dense(data, dtype: str) -> torch.Tensor:
    """Build a dense array; ``dtype`` must be ``"f32"`` or ``"f64"``."""
    if dtype not in DTYPES:
        raise ParameterError(f"dtype must be one of {sorted(DTYPES)}, got {dtype!r}")
    return torch.as_tensor(np.asarray(data), dtype=DTYPES[dtype]).clone()


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1:
        raise DimensionError(f"matmul needs at least 1-d operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    inner_b = b.shape[-2] if b.dim() > 1 else b.shape[0]
    if a.shape[-1] != inner_b:
        raise DimensionError(f"matmul inner extents differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def layer_norm(x: torch.Tensor, gain: torch.Tensor | None = None,
               bias: torch.Tensor | None = None, eps: float = 1e-5) -> torch.Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply ``gain`` and ``bias``."""
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be > 0, got {eps}")
    n = x.shape[-1]
    for name, p in (("gain", gain), ("bias", bias)):
        if p is not None and tuple(p.shape) != (n,):
            raise DimensionError(f"layer_norm {name} shape {tuple(p.shape)} != ({n},)")
    return F.layer_norm(x, (n,), gain, bias, eps)


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    if not -x.dim() <= axis < max(x.dim(), 1):
        raise DimensionError(f"softmax axis {axis} invalid for shape {tuple(x.shape)}")
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = shifted.exp()
    return e / e.sum(dim=axis, keepdim=True)


def masked_softmax(scores: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis restricted to ``key_mask`` entries.

    Masked keys get exactly zero weight, so their scores (and whatever produced
    them) cannot reach the output or its gradient.
    """
    scores = scores.masked_fill(~key_mask, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    # rows with no valid key produce NaN above; zero them
    return torch.nan_to_num(weights, nan=0.0)


def silu(x: torch.Tensor) -> torch.Tensor:
    return F.silu(x)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x, approximate="tanh")


def softplus(x: torch.Tensor) -> torch.Tensor:
    return F.softplus(x)


def tanh(x: torch.Tensor) -> torch.Tensor:
    return torch.tanh(x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


NONLINEARITIES: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "silu": silu,
    "gelu": gelu,
    "softplus": softplus,
    "tanh": tanh,
    "sigmoid": sigmoid,
}


def embedding_lookup(table: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    if index.dtype not in (torch.int32, torch.int64):
        raise ParameterError("embedding index must be an integer tensor")
    if index.numel() and (int(index.min()) < 0 or int(index.max()) >= table.shape[0]):
        raise DimensionError(f"embedding index out of range for table of {table.shape[0]} rows")
    return table[index]


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_checked: int
    scale: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def _central_difference(f, x: torch.Tensor, idx: int, h: float) -> float:
    flat = x.view(-1)
    orig = flat[idx].item()
    flat[idx] = orig + h
    fp = float(f(x))
    flat[idx] = orig - h
    fm = float(f(x))
    flat[idx] = orig
    return (fp - fm) / (2.0 * h)


def grad_check(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, h: float = 1e-5,
               tol: float = 1e-4, indices: Sequence[int] | None = None) -> GradCheckReport:
    """Compare the autograd gradient of scalar ``f`` at ``x`` with central differences.

    The error is normwise: ``max|g_tape - g_fd| / max(max|g_fd|, max|g_tape|)`` over
    the checked entries (zero when both vanish); ``scale`` is the denominator. ``indices`` restricts the check to a subset of flat positions.
    """
    if x.dtype != torch.float64:
        raise ParameterError("grad_check requires an f64 input")
    x0 = x.detach().clone().requires_grad_(True)
    y = f(x0)
    if y.numel() != 1:
        raise DimensionError(f"grad_check needs a scalar function, got shape {tuple(y.shape)}")
    if not torch.isfinite(y).all():
        raise EvaluationError(f"f(x) is not finite: {y.item()}")
    (g,) = torch.autograd.grad(y, x0, allow_unused=True)
    g = torch.zeros_like(x0) if g is None else g
    g = g.detach().reshape(-1)

    probe = x.detach().clone()
    idx = range(probe.numel()) if indices is None else indices
    tape, fd = [], []
    with torch.no_grad():
        for i in idx:
            fd.append(_central_difference(f, probe, int(i), h))
            tape.append(g[int(i)].item())
    tape_a, fd_a = np.asarray(tape), np.asarray(fd)
    scale = max(np.abs(fd_a).max(initial=0.0), np.abs(tape_a).max(initial=0.0))
    err = 0.0 if scale == 0.0 else float(np.abs(tape_a - fd_a).max() / scale)
    if not math.isfinite(err):
        raise EvaluationError("non-finite gradient comparison")
    return GradCheckReport(max_rel_error=err, tol=tol, n_checked=len(fd), scale=float(scale))
