"""Shared building blocks: masked multi-head attention, MLPs, pooling."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .numeric import NONLINEARITIES


class MaskError(ValueError):
    """Every key of an attention call is masked."""


def masked_mean(x: torch.Tensor, mask: torch.Tensor, dim: int) -> torch.Tensor:
    """Mean of ``x`` over ``dim`` counting only ``mask`` entries (zero if none)."""
    m = mask.to(x.dtype).unsqueeze(-1)
    total = (x * m).sum(dim=dim)
    count = m.sum(dim=dim).clamp_min(1.0)
    return total / count


class MLP(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, act: str = "gelu", n_hidden: int = 1):
        super().__init__()
        dims = [d_in] + [d_hidden] * n_hidden + [d_out]
        self.linears = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.act = NONLINEARITIES[act]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for lin in self.linears[:-1]:
            x = self.act(lin(x))
        return self.linears[-1](x)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with a boolean key mask.

    ``query``: (B, Nq, d), ``context``: (B, Nk, d), ``key_mask``: (B, Nk).
    """

    def __init__(self, d: int, n_heads: int):
        super().__init__()
        if d % n_heads:
            raise ValueError(f"model width {d} is not divisible by {n_heads} heads")
        self.d, self.n_heads, self.d_head = d, n_heads, d // n_heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        B, N, _ = x.shape
        return x.view(B, N, self.n_heads, self.d_head).transpose(1, 2)

    def forward(self, query: torch.Tensor, context: torch.Tensor | None = None,
                key_mask: torch.Tensor | None = None) -> torch.Tensor:
        context = query if context is None else context
        B, Nk, _ = context.shape
        if key_mask is None:
            key_mask = torch.ones(B, Nk, dtype=torch.bool, device=context.device)
        if not bool(key_mask.any(dim=-1).all()):
            raise MaskError("attention called with no unmasked key for some batch item")
        # zero masked rows so their content cannot leak through 0 * inf style arithmetic
        context = context * key_mask.unsqueeze(-1).to(context.dtype)
        q, k, v = self._split(self.q(query)), self._split(self.k(context)), self._split(self.v(context))
        o = F.scaled_dot_product_attention(q, k, v, attn_mask=key_mask[:, None, None, :])
        o = o.transpose(1, 2).reshape(query.shape[0], query.shape[1], self.d)
        return self.out(o)
