"""Training objective and conditional sampling for :class:`~pidimt.model.PiDiMT`."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .config import SampleConfig
from .diffusion import (Anchor, NoiseSchedule, SolverState, initial_latent, make_target, masked_mse,
                        perturb, sample_times, solve, to_data_prediction)
from .model import PiDiMT
from .physics import GuidanceConfig, ego_accel_window, guide, refine_from_current
from .scene import SceneBatch, SceneError


@dataclass
class LossTerms:
    denoise: torch.Tensor
    physics: torch.Tensor
    total: torch.Tensor


def anchor_for(batch: SceneBatch, current: torch.Tensor, frames: int) -> Anchor:
    """Pin frame 0 of every valid agent to ``current`` (B, A, 4)."""
    B, A, _ = current.shape
    mask = torch.zeros(B, A, frames, 4, dtype=torch.bool)
    mask[:, :, 0] = batch.agent_valid[:, :, None]
    values = torch.zeros(B, A, frames, 4, dtype=current.dtype)
    values[:, :, 0] = current
    return Anchor(mask, values)


def supervised_cells(batch: SceneBatch, frames: int) -> torch.Tensor:
    """(B, A, T, 1) mask of valid agents x future frames."""
    m = batch.agent_valid[:, :, None, None].expand(-1, -1, frames, 1).clone()
    m[:, :, 0] = False
    return m


def guidance_config(cfg: SampleConfig, enabled: bool | None = None) -> GuidanceConfig:
    return GuidanceConfig(enabled=cfg.phnn if enabled is None else enabled, steps=cfg.ph_steps,
                          anchor_len=cfg.ph_anchor, dt=cfg.ph_dt, impulse=cfg.ph_impulse,
                          semi_implicit=cfg.ph_semi_implicit)


def loss_terms(model: PiDiMT, batch: SceneBatch, target: torch.Tensor, rng: np.random.Generator,
               mode: str = "clean_signal", schedule: NoiseSchedule = NoiseSchedule(), t_min: float = 1e-3,
               time_sampling: str = "uniform", train_step: int | None = None,
               generator: torch.Generator | None = None, ph: GuidanceConfig | None = None,
               ph_weight: float = 1.0, t: np.ndarray | None = None, eps: torch.Tensor | None = None) -> LossTerms:
    """Denoising MSE on future frames of valid agents, plus the refinement fit of the ego lead segment.

    ``target`` is (B, A, 1+F, 4) in physical units with frame 0 the observed state.
    """
    if batch.batch_size == 0:
        raise SceneError("empty batch")
    x0 = model.to_model_units(target)
    B, A, T, C = x0.shape
    if t is None:
        t = sample_times(B, rng, t_min, time_sampling)
    if eps is None:
        eps = torch.as_tensor(rng.standard_normal(x0.shape), dtype=x0.dtype)
    x_t = perturb(x0, t, eps, schedule, anchor_frames=1)
    memory = model.encode(batch)
    out = model(x_t, torch.as_tensor(t, dtype=x0.dtype), memory, batch.agent_valid, train_step, generator)
    tgt = make_target(mode, x0, eps)
    cells = supervised_cells(batch, T)
    denoise = masked_mse(out, tgt.target, cells)

    physics = torch.zeros((), dtype=denoise.dtype)
    if ph is not None and ph_weight > 0:
        a_wavg = ego_accel_window(batch.agent_feats, batch.agent_frame_mask, batch.dt, ph.window)
        a_est = model.accel(a_wavg, memory.y)
        q, v = refine_from_current(target[:, 0, 0], a_est, ph)
        seg = torch.cat([q, v], dim=-1).permute(1, 0, 2)[:, : ph.anchor_len]
        ref = target[:, 0, 1: 1 + ph.anchor_len]
        physics = (((seg - ref) / model.state_scale) ** 2).mean()
    return LossTerms(denoise, physics, denoise + ph_weight * physics)


def training_step(model: PiDiMT, batch: SceneBatch, target: torch.Tensor, rng: np.random.Generator,
                  **kwargs) -> torch.Tensor:
    """Total loss for one batch with gradients populated (caller owns the optimizer)."""
    terms = loss_terms(model, batch, target, rng, **kwargs)
    terms.total.backward()
    return terms.total.detach()


def data_predictor(model: PiDiMT, memory, agent_valid: torch.Tensor, mode: str,
                   schedule: NoiseSchedule) -> Callable[[torch.Tensor, float], torch.Tensor]:
    def predict(x: torch.Tensor, t: float) -> torch.Tensor:
        out = model(x, torch.tensor([t], dtype=x.dtype), memory, agent_valid)
        return to_data_prediction(mode, out, x, t, schedule)
    return predict


@torch.no_grad()
def sample(model: PiDiMT, batch: SceneBatch, cfg: SampleConfig = SampleConfig(), mode: str = "clean_signal",
           schedule: NoiseSchedule = NoiseSchedule(), generator: torch.Generator | None = None,
           callback: Callable[[int, SolverState], None] | None = None) -> torch.Tensor:
    """Sample (B, A, 1+F, 4) ego-frame trajectories in physical units.

    Frame 0 of each valid agent is the observed current state, bit for bit.
    """
    if cfg.steps < 1:
        raise ValueError("steps must be >= 1")
    model.eval()
    if generator is None:
        generator = torch.Generator().manual_seed(cfg.seed)
    T = 1 + model.cfg.future
    memory = model.encode(batch)
    current = model.to_model_units(batch.current)
    anchor = anchor_for(batch, current, T)
    shape = (batch.batch_size, batch.n_agents, T, 4)
    x_init = initial_latent(anchor, shape, cfg.temperature, generator)
    predict = data_predictor(model, memory, batch.agent_valid, mode, schedule)
    ph = guidance_config(cfg)
    if ph.enabled and cfg.ph_per_step:
        base = predict

        def predict(x, t):  # noqa: F811
            x0 = model.to_physical(base(x, t))
            x0 = guide(x0, batch.agent_feats, batch.agent_frame_mask, memory.y, model.accel, ph, batch.dt)
            return model.to_model_units(x0)

    x = solve(predict, x_init, cfg.steps, schedule, anchor, t_min=cfg.t_min, callback=callback)
    traj = model.to_physical(x) * batch.agent_valid[:, :, None, None].to(x.dtype)
    traj[:, :, 0] = torch.where(batch.agent_valid[:, :, None], batch.current, traj[:, :, 0])
    if ph.enabled and not cfg.ph_per_step:
        traj = guide(traj, batch.agent_feats, batch.agent_frame_mask, memory.y, model.accel, ph, batch.dt)
    return traj
