"""Variance-preserving continuous-time diffusion: marginals, training targets
and a deterministic second-order multistep sampler in log-SNR with anchoring."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .numeric import DimensionError, ParameterError

MODES = ("clean_signal", "scaled_noise")


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta VP schedule on ``t in [0, 1]``."""

    beta_min: float = 0.1
    beta_max: float = 20.0

    def _check(self, t):
        arr = np.asarray(t, dtype=np.float64)
        if np.any(arr < 0) or np.any(arr > 1) or not np.all(np.isfinite(arr)):
            raise ParameterError(f"diffusion time must lie in [0, 1], got {t}")

    def integral_beta(self, t):
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t**2

    def log_alpha(self, t):
        self._check(t)
        return -0.5 * self.integral_beta(t)

    def marginal(self, t) -> tuple:
        """``(alpha, sigma)`` at ``t`` (floats or numpy arrays)."""
        la = self.log_alpha(t)
        alpha = np.exp(la)
        # sqrt(1 - alpha^2) without cancellation for small t
        sigma = np.sqrt(-np.expm1(2.0 * la))
        if np.ndim(alpha) == 0:
            return float(alpha), float(sigma)
        return alpha, sigma

    def lam(self, t):
        """log-SNR ``log(alpha / sigma)``."""
        la = self.log_alpha(t)
        return la - 0.5 * np.log(-np.expm1(2.0 * la))

    def t_of_lambda(self, lam):
        """Inverse of :meth:`lam` (closed form for the linear schedule)."""
        lam = np.asarray(lam, dtype=np.float64)
        # -2 log alpha = log(1 + e^{-2 lam}) = beta_min t + (db / 2) t^2
        c = np.logaddexp(0.0, -2.0 * lam)
        db = self.beta_max - self.beta_min
        t = 2.0 * c / (self.beta_min + np.sqrt(self.beta_min**2 + 2.0 * db * c))
        return float(t) if t.ndim == 0 else t


def vp_marginal(t: float, schedule: NoiseSchedule = NoiseSchedule()) -> tuple[float, float]:
    return schedule.marginal(t)


def _bcast(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return v.reshape(-1, *([1] * (like.dim() - 1))).to(like.dtype)


def perturb(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule = NoiseSchedule(),
            anchor_frames: int = 0) -> torch.Tensor:
    """``alpha(t) x0 + sigma(t) eps``; per-item ``t`` broadcasts over the batch axis.

    With ``anchor_frames > 0`` the tensor is read as (B, A, T, C) and the
    leading frames are returned clean.
    """
    if eps.shape != x0.shape:
        raise DimensionError(f"noise shape {tuple(eps.shape)} != data shape {tuple(x0.shape)}")
    t_arr = np.asarray(t.detach().cpu() if isinstance(t, torch.Tensor) else t, dtype=np.float64)
    alpha, sigma = schedule.marginal(t_arr)
    if t_arr.ndim == 0:
        x_t = alpha * x0 + sigma * eps
    else:
        a = _bcast(torch.as_tensor(alpha), x0)
        s = _bcast(torch.as_tensor(sigma), x0)
        x_t = a * x0 + s * eps
    if anchor_frames:
        x_t = torch.cat([x0[:, :, :anchor_frames], x_t[:, :, anchor_frames:]], dim=2)
    return x_t


def sample_times(n: int, rng: np.random.Generator, t_min: float = 1e-3, kind: str = "uniform",
                 logit_mean: float = 0.0, logit_std: float = 1.0) -> np.ndarray:
    """Training times in ``[t_min, 1]``; ``kind`` is ``uniform`` or ``logit_normal``."""
    if kind == "uniform":
        return rng.uniform(t_min, 1.0, size=n)
    if kind == "logit_normal":
        z = rng.normal(logit_mean, logit_std, size=n)
        return t_min + (1.0 - t_min) / (1.0 + np.exp(-z))
    raise ParameterError(f"unknown time sampling {kind!r}")


@dataclass
class TrainTarget:
    mode: str
    target: torch.Tensor
    weight: float = 1.0


def make_target(mode: str, x0: torch.Tensor, eps: torch.Tensor) -> TrainTarget:
    if mode == "clean_signal":
        return TrainTarget(mode, x0)
    if mode == "scaled_noise":
        return TrainTarget(mode, eps)
    raise ParameterError(f"unknown target mode {mode!r}; expected one of {MODES}")


def to_data_prediction(mode: str, output: torch.Tensor, x_t: torch.Tensor, t: float,
                       schedule: NoiseSchedule) -> torch.Tensor:
    if mode == "clean_signal":
        return output
    alpha, sigma = schedule.marginal(t)
    return (x_t - sigma * output) / alpha


def masked_mse(pred: torch.Tensor, target: torch.Tensor, cell_mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over the cells where ``cell_mask`` (broadcastable) is true."""
    m = cell_mask.to(pred.dtype).expand_as(pred)
    return ((pred - target) ** 2 * m).sum() / m.sum().clamp_min(1.0)


# ------------------------------------------------------------------- sampler


def lambda_grid(n_steps: int, schedule: NoiseSchedule, t_max: float = 1.0, t_min: float = 1e-3) -> np.ndarray:
    """Times whose log-SNR values are uniformly spaced, from ``t_max`` down to ``t_min``."""
    if n_steps < 1:
        raise ParameterError("n_steps must be >= 1")
    lams = np.linspace(schedule.lam(t_max), schedule.lam(t_min), n_steps + 1)
    ts = schedule.t_of_lambda(lams)
    ts[0], ts[-1] = t_max, t_min
    return ts


@dataclass
class Anchor:
    """Entries of the iterate that are pinned to observed values."""

    mask: torch.Tensor  # bool, broadcastable to the iterate
    values: torch.Tensor

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        return torch.where(self.mask, self.values.to(x.dtype), x)


@dataclass
class SolverState:
    t_grid: np.ndarray
    x: torch.Tensor
    anchor: Anchor | None = None
    history: list[tuple[float, torch.Tensor]] = field(default_factory=list)  # (lambda, x0_hat)


DataPredictor = Callable[[torch.Tensor, float], torch.Tensor]


def solver_step(state: SolverState, k: int, model: DataPredictor,
                schedule: NoiseSchedule = NoiseSchedule()) -> SolverState:
    """Advance from ``t_grid[k]`` to ``t_grid[k+1]``; first step is first order."""
    n_steps = len(state.t_grid) - 1
    if not 0 <= k < n_steps:
        raise ParameterError(f"step index {k} outside [0, {n_steps})")
    s, t = float(state.t_grid[k]), float(state.t_grid[k + 1])
    lam_s, lam_t = schedule.lam(s), schedule.lam(t)
    alpha_t, sigma_t = schedule.marginal(t)
    _, sigma_s = schedule.marginal(s)
    h = lam_t - lam_s

    x0_hat = model(state.x, s)
    if state.history:
        lam_prev, x0_prev = state.history[-1]
        r = (lam_s - lam_prev) / h
        d = (1.0 + 0.5 / r) * x0_hat - (0.5 / r) * x0_prev
    else:
        d = x0_hat
    x = (sigma_t / sigma_s) * state.x - alpha_t * math.expm1(-h) * d
    if state.anchor is not None:
        x = state.anchor.apply(x)
    history = (state.history + [(lam_s, x0_hat)])[-2:]
    return SolverState(state.t_grid, x, state.anchor, history)


def solve(model: DataPredictor, x_init: torch.Tensor, n_steps: int, schedule: NoiseSchedule = NoiseSchedule(),
          anchor: Anchor | None = None, t_max: float = 1.0, t_min: float = 1e-3,
          callback: Callable[[int, SolverState], None] | None = None) -> torch.Tensor:
    """Integrate the probability-flow ODE from ``t_max`` to ``t_min``."""
    x = anchor.apply(x_init) if anchor is not None else x_init
    state = SolverState(lambda_grid(n_steps, schedule, t_max, t_min), x, anchor)
    if callback is not None:
        callback(-1, state)
    for k in range(n_steps):
        state = solver_step(state, k, model, schedule)
        if callback is not None:
            callback(k, state)
    return state.x


def initial_latent(anchor: Anchor, shape, temperature: float, generator: torch.Generator | None,
                   dtype=torch.float32) -> torch.Tensor:
    """Temperature-scaled Gaussian noise with the anchored entries set to their observations."""
    noise = torch.randn(shape, generator=generator, dtype=dtype) * temperature
    return anchor.apply(noise)
