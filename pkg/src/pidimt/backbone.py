"""DiMT denoiser: Mamba, self-attention, gated MLP, cross-attention and MoE
residual subpaths under one adaptive modulation head per block."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .encoders import SceneMemory
from .layers import MLP, MultiHeadAttention
from .numeric import ParameterError, silu, softplus

SUBPATHS = ("mamba", "self_attn", "gated_mlp", "cross_attn", "moe")


class ConfigError(ValueError):
    """Invalid architecture or run configuration."""


# ------------------------------------------------------------------ scan


def scan(a_bar: torch.Tensor, bx: torch.Tensor, C: torch.Tensor) -> torch.Tensor:
    """Run ``h_t = a_bar_t * h_{t-1} + bx_t``, ``y_t = <C_t, h_t>`` left to right.

    ``a_bar``, ``bx``: (batch, L, d, n); ``C``: (batch, L, n). ``h_0 = 0``.
    Returns (batch, L, d).
    """
    batch, L, d, n = bx.shape
    h = bx.new_zeros(batch, d, n)
    hs = []
    # unbind once: per-step indexing would make the backward pass quadratic in L
    for a_t, bx_t in zip(a_bar.unbind(1), bx.unbind(1)):
        h = a_t * h + bx_t
        hs.append(h)
    return (torch.stack(hs, dim=1) * C.unsqueeze(2)).sum(-1)


def discretize(delta: torch.Tensor, A: torch.Tensor, B: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Zero-order hold for diagonal ``A``: ``a_bar = exp(delta A)``, ``b_bar = (a_bar - 1) / A * B``.

    ``delta``: (batch, L, d), ``A``: (d, n) with negative entries, ``B``: (batch, L, n).
    """
    dA = delta.unsqueeze(-1) * A
    a_bar = torch.exp(dA)
    # (exp(dA) - 1) / A == delta * expm1(dA) / dA, finite as delta -> 0
    b_bar = torch.expm1(dA) / A * B.unsqueeze(2)
    return a_bar, b_bar


def mamba_scan(x: torch.Tensor, delta: torch.Tensor, A: torch.Tensor, B: torch.Tensor,
               C: torch.Tensor) -> torch.Tensor:
    """Selective state-space recurrence over ``x`` of shape (batch, L, d)."""
    if x.shape[1] < 1:
        raise ValueError("mamba_scan needs a sequence of length >= 1")
    a_bar, b_bar = discretize(delta, A, B)
    return scan(a_bar, b_bar * x.unsqueeze(-1), C)


class MambaMixer(nn.Module):
    """Input-dependent SSM sequence mixer with a SiLU output gate.

    Masked tokens get ``delta = 0``, which makes them pass the state through
    unchanged (``a_bar = 1``, ``b_bar = 0``), so they cannot leak into the scan.
    """

    def __init__(self, d: int, n_state: int = 16, expand: int = 1):
        super().__init__()
        inner = d * expand
        self.in_proj = nn.Linear(d, 2 * inner)
        self.delta_proj = nn.Linear(inner, inner)
        self.B_proj = nn.Linear(inner, n_state, bias=False)
        self.C_proj = nn.Linear(inner, n_state, bias=False)
        self.A_log = nn.Parameter(torch.log(torch.arange(1, n_state + 1, dtype=torch.float32)).repeat(inner, 1))
        self.D = nn.Parameter(torch.ones(inner))
        self.out_proj = nn.Linear(inner, d)
        with torch.no_grad():
            # softplus(bias) spans [1e-3, 1e-1]
            dt = torch.exp(torch.linspace(math.log(1e-3), math.log(1e-1), inner))
            self.delta_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))
            self.delta_proj.weight.mul_(0.1)

    @property
    def A(self) -> torch.Tensor:
        return -torch.exp(self.A_log)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        u, z = self.in_proj(x).chunk(2, dim=-1)
        u = silu(u)
        delta = softplus(self.delta_proj(u))
        if mask is not None:
            keep = mask.unsqueeze(-1).to(x.dtype)
            u, delta = u * keep, delta * keep
        y = mamba_scan(u, delta, self.A.to(x.dtype), self.B_proj(u), self.C_proj(u))
        y = (y + self.D * u) * silu(z)
        return self.out_proj(y)


# ---------------------------------------------------------------- modulation


class ModulationHead(nn.Module):
    """One linear map from ``y`` to (scale, shift, gate) for every subpath.

    Gate rows start at zero so each residual branch is the identity at init.
    """

    def __init__(self, d: int, subpaths: tuple[str, ...] = SUBPATHS):
        super().__init__()
        self.subpaths = subpaths
        self.d = d
        self.linear = nn.Linear(d, 3 * d * len(subpaths))
        with torch.no_grad():
            nn.init.normal_(self.linear.weight, std=0.02)
            self.linear.bias.zero_()
            w = self.linear.weight.view(len(subpaths), 3, d, d)
            w[:, 2].zero_()

    def forward(self, y: torch.Tensor) -> dict[str, tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
        out = self.linear(y).view(*y.shape[:-1], len(self.subpaths), 3, self.d)
        return {name: (out[..., i, 0, :], out[..., i, 1, :], out[..., i, 2, :])
                for i, name in enumerate(self.subpaths)}


# ----------------------------------------------------------------------- MoE


@dataclass(frozen=True)
class GateNoiseSchedule:
    """Linear decay of the router-logit noise scale from ``sigma0`` to 0 at ``end_step``."""

    sigma0: float = 1.0
    end_step: int = 1000

    def __call__(self, step: int | None) -> float:
        if step is None or self.end_step <= 0:
            return 0.0
        return self.sigma0 * max(0.0, 1.0 - step / self.end_step)


class GatedMLP(nn.Module):
    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.up = nn.Linear(d, hidden)
        self.gate = nn.Linear(d, hidden)
        self.down = nn.Linear(hidden, d)

    def forward(self, x):
        return self.down(silu(self.gate(x)) * self.up(x))


class MixtureOfExperts(nn.Module):
    """Top-k routed shallow experts plus the plain average of always-on deep experts."""

    def __init__(self, d: int, n_shallow: int = 4, n_deep: int = 1, top_k: int = 2,
                 noise: GateNoiseSchedule = GateNoiseSchedule(), deep_layers: int = 3):
        super().__init__()
        if not 1 <= top_k <= n_shallow:
            raise ConfigError(f"top_k={top_k} must lie in [1, n_shallow={n_shallow}]")
        self.top_k, self.noise = top_k, noise
        self.router = nn.Linear(d, n_shallow)
        self.shallow = nn.ModuleList(MLP(d, d, d, act="gelu", n_hidden=1) for _ in range(n_shallow))
        self.deep = nn.ModuleList(MLP(d, d, d, act="gelu", n_hidden=deep_layers) for _ in range(n_deep))

    def gate_weights(self, logits: torch.Tensor) -> torch.Tensor:
        """Dense (..., E) weights: softmax over the top-k logits, zero elsewhere."""
        top, idx = logits.topk(self.top_k, dim=-1)
        w = torch.softmax(top, dim=-1)
        return torch.zeros_like(logits).scatter(-1, idx, w)

    def route(self, x: torch.Tensor, train_step: int | None = None,
              generator: torch.Generator | None = None) -> torch.Tensor:
        logits = self.router(x)
        sigma = self.noise(train_step) if self.training else 0.0
        if sigma > 0:
            eps = torch.randn(logits.shape, generator=generator, dtype=logits.dtype)
            logits = logits + sigma * eps
        return self.gate_weights(logits)

    def forward(self, x: torch.Tensor, train_step: int | None = None,
                generator: torch.Generator | None = None) -> torch.Tensor:
        w = self.route(x, train_step, generator)
        shallow = torch.stack([e(x) for e in self.shallow], dim=-1)
        out = (shallow * w.unsqueeze(-2)).sum(-1)
        if len(self.deep):
            out = out + torch.stack([e(x) for e in self.deep], dim=0).mean(0)
        return out


# --------------------------------------------------------------------- block


class DiMTBlock(nn.Module):
    """Five gated residual subpaths ``x <- x + gate * f((1 + scale) * LN(x) + shift)``."""

    def __init__(self, d: int, n_heads: int, n_state: int = 16, n_shallow: int = 4, n_deep: int = 1,
                 top_k: int = 2, noise: GateNoiseSchedule = GateNoiseSchedule(),
                 order: tuple[str, ...] = SUBPATHS, residual_scale: float = 1.0):
        super().__init__()
        if sorted(order) != sorted(SUBPATHS):
            raise ConfigError(f"block order must be a permutation of {SUBPATHS}, got {order}")
        self.order = tuple(order)
        self.residual_scale = residual_scale
        self.modulation = ModulationHead(d, SUBPATHS)
        self.norms = nn.ModuleDict({k: nn.LayerNorm(d, elementwise_affine=False) for k in SUBPATHS})
        self.mamba = MambaMixer(d, n_state)
        self.self_attn = MultiHeadAttention(d, n_heads)
        self.gated_mlp = GatedMLP(d, 2 * d)
        self.cross_attn = MultiHeadAttention(d, n_heads)
        self.moe = MixtureOfExperts(d, n_shallow, n_deep, top_k, noise)
        self.enabled = set(SUBPATHS)

    def subpath(self, name: str, h: torch.Tensor, mask: torch.Tensor, memory: SceneMemory,
                train_step: int | None, generator: torch.Generator | None) -> torch.Tensor:
        if name == "mamba":
            return self.mamba(h, mask)
        if name == "self_attn":
            return self.self_attn(h, key_mask=mask)
        if name == "gated_mlp":
            return self.gated_mlp(h)
        if name == "cross_attn":
            return self.cross_attn(h, memory.tokens, memory.mask)
        return self.moe(h, train_step, generator)

    def forward(self, x: torch.Tensor, mask: torch.Tensor, y: torch.Tensor, memory: SceneMemory,
                train_step: int | None = None, generator: torch.Generator | None = None) -> torch.Tensor:
        mods = self.modulation(y)
        for name in self.order:
            if name not in self.enabled:
                continue
            scale, shift, gate = (m.unsqueeze(1) for m in mods[name])
            h = self.norms[name](x) * (1 + scale) + shift
            x = x + self.residual_scale * gate * self.subpath(name, h, mask, memory, train_step, generator)
        return x


# ------------------------------------------------------------------ denoiser


def timestep_features(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features of ``1000 * t``."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class Denoiser(nn.Module):
    """Joint ego+neighbour trajectory denoiser over (agent, frame) tokens, flattened agent-major."""

    def __init__(self, d: int, n_heads: int, n_blocks: int, frames: int, channels: int = 4,
                 n_state: int = 16, n_shallow: int = 4, n_deep: int = 1, top_k: int = 2,
                 noise: GateNoiseSchedule = GateNoiseSchedule(), order: tuple[str, ...] = SUBPATHS,
                 residual_downscale: bool = False):
        super().__init__()
        self.d, self.frames, self.channels = d, frames, channels
        self.state_in = nn.Linear(channels, d)
        self.frame_emb = nn.Embedding(frames, d)
        self.role_emb = nn.Embedding(2, d)
        self.agent_ctx = nn.Linear(d, d)
        self.time_mlp = MLP(d, d, d, act="silu")
        rs = 1.0 / math.sqrt(2 * n_blocks) if residual_downscale else 1.0
        self.blocks = nn.ModuleList(
            DiMTBlock(d, n_heads, n_state, n_shallow, n_deep, top_k, noise, order, rs) for _ in range(n_blocks))
        self.out_norm = nn.LayerNorm(d)
        self.out_proj = nn.Linear(d, channels)

    def embed(self, x_t: torch.Tensor, memory: SceneMemory, agent_valid: torch.Tensor) -> torch.Tensor:
        B, A, T, C = x_t.shape
        keep = agent_valid.to(x_t.dtype)[:, :, None, None]
        h = self.state_in(x_t * keep)
        h = h + self.frame_emb.weight[:T].to(x_t.dtype)
        role = torch.zeros(A, dtype=torch.long)
        role[1:] = 1
        h = h + self.role_emb(role).to(x_t.dtype)[None, :, None, :]
        h = h + self.agent_ctx(memory.tokens[:, :A]).unsqueeze(2)
        return (h * keep).reshape(B, A * T, self.d)

    def condition(self, y: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return y + self.time_mlp(timestep_features(t, self.d).to(y.dtype))

    def run_blocks(self, tokens, token_mask, y_t, memory, train_step=None, generator=None):
        for blk in self.blocks:
            tokens = blk(tokens, token_mask, y_t, memory, train_step, generator)
        return tokens

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, memory: SceneMemory, agent_valid: torch.Tensor,
                train_step: int | None = None, generator: torch.Generator | None = None) -> torch.Tensor:
        B, A, T, C = x_t.shape
        t = torch.as_tensor(t, dtype=x_t.dtype).reshape(-1).expand(B)
        if bool(((t < 0) | (t > 1)).any()):
            raise ParameterError("diffusion time must lie in [0, 1]")
        token_mask = agent_valid.unsqueeze(-1).expand(B, A, T).reshape(B, A * T)
        h = self.embed(x_t, memory, agent_valid)
        h = self.run_blocks(h, token_mask, self.condition(memory.y, t), memory, train_step, generator)
        out = self.out_proj(self.out_norm(h)).reshape(B, A, T, C)
        return out * agent_valid.to(out.dtype)[:, :, None, None]
