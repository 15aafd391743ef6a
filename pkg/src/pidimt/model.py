"""The full planner network: scene encoder, DiMT denoiser, acceleration estimator."""
from __future__ import annotations

import torch
from torch import nn

from .backbone import Denoiser, GateNoiseSchedule
from .config import ModelConfig
from .encoders import REFERENCE_HEADS, REFERENCE_WIDTH, SceneEncoder, SceneMemory
from .physics import AccelEstimator
from .scene import SceneBatch, SceneLimits


def scene_limits(cfg: ModelConfig) -> SceneLimits:
    return SceneLimits(cfg.history, cfg.neighbors, cfg.statics, cfg.lanes, cfg.lane_points, cfg.route_lanes)


class PiDiMT(nn.Module):
    def __init__(self, cfg: ModelConfig, noise: GateNoiseSchedule = GateNoiseSchedule()):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = SceneEncoder(cfg.d, cfg.n_heads, cfg.history, cfg.lane_points,
                                    cfg.mixer_depth, cfg.fusion_depth)
        self.denoiser = Denoiser(cfg.d, cfg.n_heads, cfg.n_blocks, frames=1 + cfg.future, channels=4,
                                 n_state=cfg.n_state, n_shallow=cfg.n_shallow, n_deep=cfg.n_deep,
                                 top_k=cfg.top_k, noise=noise, order=tuple(cfg.block_order),
                                 residual_downscale=cfg.residual_downscale)
        self.accel = AccelEstimator(cfg.d, cfg.accel_hidden, cfg.a_max)
        scale = torch.tensor([cfg.pos_scale, cfg.pos_scale, cfg.vel_scale, cfg.vel_scale])
        self.register_buffer("state_scale", scale, persistent=False)

    @property
    def uses_reference_dims(self) -> bool:
        return self.cfg.d == REFERENCE_WIDTH and self.cfg.n_heads == REFERENCE_HEADS

    @property
    def limits(self) -> SceneLimits:
        return scene_limits(self.cfg)

    def set_gate_noise(self, noise: GateNoiseSchedule) -> None:
        for blk in self.denoiser.blocks:
            blk.moe.noise = noise

    # physical (m, m/s) <-> model units; scales are powers of two so the round trip is exact
    def to_model_units(self, traj: torch.Tensor) -> torch.Tensor:
        return traj / self.state_scale.to(traj.dtype)

    def to_physical(self, traj: torch.Tensor) -> torch.Tensor:
        return traj * self.state_scale.to(traj.dtype)

    def encode(self, batch: SceneBatch) -> SceneMemory:
        return self.encoder(batch)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, memory: SceneMemory, agent_valid: torch.Tensor,
                train_step: int | None = None, generator: torch.Generator | None = None) -> torch.Tensor:
        return self.denoiser(x_t, t, memory, agent_valid, train_step, generator)
