"""Port-Hamiltonian refinement of the leading ego segment.

With the potential term dropped (flat ground) the Hamiltonian is purely
kinetic, ``H = |p|^2 / 2m``, so ``dH/dp = p / m`` and ``dH/dq = 0``. The
general form ``x' = (J - R) grad H + G u`` is instantiated with canonical
``J``, ``R = 0`` and ``G u = Q_nc``; see :data:`CANONICAL_J`.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .numeric import ParameterError

# x = (q, p): J maps grad H = (dH/dq, dH/dp) to (dH/dp, -dH/dq)
CANONICAL_J = torch.tensor([[0.0, 1.0], [-1.0, 0.0]])
IMPULSE_MODES = ("dt_scaled", "literal")


class HistoryError(ValueError):
    """Not enough acceleration history for the requested window."""


def weighted_avg_accel(history: torch.Tensor, n: int, valid: torch.Tensor | None = None) -> torch.Tensor:
    """Mean of the last ``n`` accelerations, ``history`` shaped (..., H, 2) oldest first.

    With ``valid`` (..., H) only flagged entries in the window count; a window
    with no valid entry averages to zero.
    """
    if n < 1:
        raise HistoryError("window length must be >= 1")
    if history.shape[-2] < n:
        raise HistoryError(f"need {n} accelerations, history has {history.shape[-2]}")
    window = history[..., -n:, :]
    if valid is None:
        return window.mean(dim=-2)
    w = valid[..., -n:].to(history.dtype).unsqueeze(-1)
    return (window * w).sum(-2) / w.sum(-2).clamp_min(1.0)


def accel_history(velocities: torch.Tensor, frame_valid: torch.Tensor, dt: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Backward-difference accelerations from (..., V, 2) velocities; returns (..., V-1, 2) and validity."""
    acc = (velocities[..., 1:, :] - velocities[..., :-1, :]) / dt
    ok = frame_valid[..., 1:] & frame_valid[..., :-1]
    return acc * ok.unsqueeze(-1).to(acc.dtype), ok


class AccelEstimator(nn.Module):
    """Two-layer perceptron on ``[a_wavg, y]`` bounded to ``+-a_max`` by tanh."""

    def __init__(self, d: int, hidden: int = 64, a_max: float = 8.0):
        super().__init__()
        self.a_max = a_max
        self.hidden = nn.Linear(2 + d, hidden)
        self.out = nn.Linear(hidden, 2)
        with torch.no_grad():
            self.out.bias.zero_()

    def forward(self, a_wavg: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        h = torch.tanh(self.hidden(torch.cat([a_wavg, y], dim=-1)))
        return self.a_max * torch.tanh(self.out(h))


def estimate_accel(estimator: AccelEstimator, a_wavg: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return estimator(a_wavg, y)


@dataclass
class PHState:
    q: torch.Tensor  # positions (..., 2)
    p: torch.Tensor  # momenta (..., 2)
    mass: float = 1.0
    dt: float = 0.1
    steps: int = 10
    q_mask: torch.Tensor | None = None
    p_mask: torch.Tensor | None = None

    def __post_init__(self):
        if self.mass <= 0:
            raise ParameterError(f"mass must be > 0, got {self.mass}")
        if self.steps < 1:
            raise ParameterError(f"number of updates must be >= 1, got {self.steps}")
        if self.dt <= 0:
            raise ParameterError(f"step size must be > 0, got {self.dt}")
        if self.q_mask is None:
            self.q_mask = torch.ones_like(self.q)
        if self.p_mask is None:
            self.p_mask = torch.ones_like(self.p)


def hamiltonian(p: torch.Tensor, mass: float) -> torch.Tensor:
    return (p**2).sum(-1) / (2.0 * mass)


def symplectic_refine(state: PHState, q_nc: torch.Tensor, impulse: str = "dt_scaled",
                      semi_implicit: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """Run ``state.steps`` updates; returns (S, ..., 2) stacks of ``q^(1..S)``, ``p^(1..S)``.

    ``impulse="dt_scaled"`` adds ``dt * Q_nc`` per step, ``"literal"`` adds ``Q_nc``.
    ``semi_implicit`` updates ``p`` first and feeds the new momentum to ``q``.
    """
    if impulse not in IMPULSE_MODES:
        raise ParameterError(f"impulse must be one of {IMPULSE_MODES}, got {impulse!r}")
    m, dt = state.mass, state.dt
    kick = dt * q_nc if impulse == "dt_scaled" else q_nc
    dH_dq = torch.zeros_like(state.q)
    q, p = state.q, state.p
    qs, ps = [], []
    for _ in range(state.steps):
        p_new = p + state.p_mask * (-dt * dH_dq + kick)
        p_drive = p_new if semi_implicit else p
        q = q + state.q_mask * (dt * p_drive / m)
        p = p_new
        qs.append(q)
        ps.append(p)
    return torch.stack(qs), torch.stack(ps)


def inject_refined(traj: torch.Tensor, q: torch.Tensor, v: torch.Tensor, anchor_len: int) -> torch.Tensor:
    """Overwrite ego frames ``1..anchor_len`` of (B, A, T, 4) ``traj`` with refined states.

    ``q`` and ``v`` are (S, B, 2) with ``S >= anchor_len``.
    """
    future = traj.shape[2] - 1
    if anchor_len < 0 or anchor_len > future:
        raise ParameterError(f"anchor length {anchor_len} outside [0, {future}]")
    if anchor_len > q.shape[0]:
        raise ParameterError(f"anchor length {anchor_len} exceeds {q.shape[0]} refinement steps")
    if anchor_len == 0:
        return traj
    seg = torch.cat([q[:anchor_len], v[:anchor_len]], dim=-1).permute(1, 0, 2).to(traj.dtype)
    ego = torch.cat([traj[:, 0, :1], seg, traj[:, 0, 1 + anchor_len:]], dim=1)
    return torch.cat([ego.unsqueeze(1), traj[:, 1:]], dim=1)


@dataclass
class GuidanceConfig:
    enabled: bool = True
    steps: int = 10
    anchor_len: int = 10
    dt: float = 0.1
    mass: float = 1.0
    window: int = 5
    impulse: str = "dt_scaled"
    semi_implicit: bool = False


def ego_accel_window(agent_feats: torch.Tensor, frame_mask: torch.Tensor, dt: float, window: int) -> torch.Tensor:
    """Moving-average ego acceleration over the last ``window`` history steps, (B, 2)."""
    vel = agent_feats[:, 0, :, 4:6]
    acc, ok = accel_history(vel, frame_mask[:, 0], dt)
    return weighted_avg_accel(acc, window, ok)


def refine_from_current(current: torch.Tensor, a_est: torch.Tensor, cfg: GuidanceConfig):
    """Refined (q, v) stacks of shape (S, B, 2) starting from ego ``current`` (B, 4)."""
    state = PHState(q=current[:, :2], p=cfg.mass * current[:, 2:4], mass=cfg.mass, dt=cfg.dt, steps=cfg.steps)
    q_nc = cfg.mass * a_est
    q, p = symplectic_refine(state, q_nc, cfg.impulse, cfg.semi_implicit)
    return q, p / cfg.mass


def guide(traj: torch.Tensor, agent_feats: torch.Tensor, frame_mask: torch.Tensor, y: torch.Tensor,
          estimator: AccelEstimator, cfg: GuidanceConfig, dt: float | None = None) -> torch.Tensor:
    """Refine the ego's leading segment of ``traj`` (B, A, T, 4), ego frame, physical units."""
    if not cfg.enabled:
        return traj
    if not cfg.anchor_len <= cfg.steps <= traj.shape[2] - 1:
        raise ParameterError(
            f"need anchor_len ({cfg.anchor_len}) <= steps ({cfg.steps}) <= future frames ({traj.shape[2] - 1})")
    a_wavg = ego_accel_window(agent_feats, frame_mask, dt or cfg.dt, cfg.window)
    a_est = estimator(a_wavg.to(y.dtype), y)
    q, v = refine_from_current(traj[:, 0, 0], a_est.to(traj.dtype), cfg)
    return inject_refined(traj, q, v, cfg.anchor_len)
