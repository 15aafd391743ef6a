"""Optimizer loop, learning-rate schedule and checkpoint save/restore."""
from __future__ import annotations

import base64
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import ConfigError, GateNoiseSchedule
from .checkpoint import LoadError, read_checkpoint, write_checkpoint
from .config import ModelConfig, RunConfig
from .model import PiDiMT, scene_limits
from .physics import GuidanceConfig
from .planner import guidance_config, loss_terms
from .scenarios import batch_targets, scenario_pool

log = logging.getLogger(__name__)


def learning_rate(step: int, cfg: RunConfig) -> float:
    """Warm-up then cosine decay; scaled by ``1/sqrt(n_blocks)`` when depth scaling is on."""
    tc = cfg.train
    base = tc.lr / math.sqrt(cfg.model.n_blocks) if tc.depth_lr_scaling else tc.lr
    if tc.warmup > 0 and step < tc.warmup:
        return base * (step + 1) / tc.warmup
    span = max(1, tc.steps - tc.warmup)
    progress = min(1.0, (step - tc.warmup) / span)
    return base * (tc.min_lr_frac + (1 - tc.min_lr_frac) * 0.5 * (1 + math.cos(math.pi * progress)))


def gate_noise_schedule(cfg: RunConfig) -> GateNoiseSchedule:
    return GateNoiseSchedule(cfg.train.gate_noise_sigma0, int(cfg.train.gate_noise_end_frac * cfg.train.steps))


@dataclass
class Trainer:
    cfg: RunConfig
    model: PiDiMT
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    generator: torch.Generator
    step: int = 0
    losses: list[float] = field(default_factory=list)
    denoise_losses: list[float] = field(default_factory=list)
    clipped_norms: list[float] = field(default_factory=list)

    @classmethod
    def create(cls, cfg: RunConfig) -> "Trainer":
        cfg.validate()
        torch.manual_seed(cfg.train.seed)
        model = PiDiMT(cfg.model, gate_noise_schedule(cfg))
        opt = torch.optim.AdamW(model.parameters(), lr=cfg.train.lr, weight_decay=cfg.train.weight_decay)
        rng = np.random.default_rng(cfg.train.seed)
        gen = torch.Generator().manual_seed(cfg.train.seed)
        return cls(cfg, model, opt, rng, gen)

    @property
    def guidance(self) -> GuidanceConfig:
        return guidance_config(self.cfg.sample, enabled=True)

    def train_step(self, batch, target) -> float:
        tc = self.cfg.train
        self.model.train()
        for group in self.optimizer.param_groups:
            group["lr"] = learning_rate(self.step, self.cfg)
        self.optimizer.zero_grad(set_to_none=True)
        terms = loss_terms(self.model, batch, target, self.rng, mode=tc.mode, t_min=tc.t_min,
                           time_sampling=tc.time_sampling, train_step=self.step, generator=self.generator,
                           ph=self.guidance, ph_weight=tc.ph_loss_weight)
        terms.total.backward()
        terms = type(terms)(*(v.detach() for v in (terms.denoise, terms.physics, terms.total)))
        torch.nn.utils.clip_grad_norm_(self.model.parameters(), tc.grad_clip)
        self.clipped_norms.append(grad_norm(self.model))
        self.optimizer.step()
        self.step += 1
        self.losses.append(terms.total.item())
        self.denoise_losses.append(terms.denoise.item())
        return self.losses[-1]

    # ------------------------------------------------------------ checkpoint

    def save(self, path: str | Path) -> None:
        tensors = {f"param/{k}": v for k, v in self.model.state_dict().items()}
        opt_state = self.optimizer.state_dict()
        names = [n for n, _ in self.model.named_parameters()]
        steps = {}
        for i, name in enumerate(names):
            st = opt_state["state"].get(i)
            if st:
                tensors[f"adam_m/{name}"] = st["exp_avg"]
                tensors[f"adam_v/{name}"] = st["exp_avg_sq"]
                steps[name] = float(st["step"])
        header = {
            "format": "pidimt-checkpoint",
            "config": self.cfg.to_dict(),
            "step": self.step,
            "seed": self.cfg.train.seed,
            "numpy_rng": self.rng.bit_generator.state,
            "torch_rng": base64.b64encode(self.generator.get_state().numpy().tobytes()).decode(),
            "adam_steps": steps,
        }
        write_checkpoint(path, tensors, header)

    @classmethod
    def load(cls, path: str | Path, cfg: RunConfig | None = None) -> "Trainer":
        tensors, header = read_checkpoint(path)
        saved = RunConfig.from_dict(header["config"])
        if cfg is None:
            cfg = saved
        elif cfg.model != saved.model:
            diff = [k for k in cfg.model.__dataclass_fields__
                    if getattr(cfg.model, k) != getattr(saved.model, k)]
            raise LoadError(f"architecture mismatch between checkpoint and config: {diff}")
        trainer = cls.create(cfg)
        state = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
        try:
            trainer.model.load_state_dict(state)
        except RuntimeError as exc:
            raise LoadError(f"architecture mismatch: {exc}") from None
        opt_state = trainer.optimizer.state_dict()
        for i, (name, _) in enumerate(trainer.model.named_parameters()):
            if name in header["adam_steps"]:
                opt_state["state"][i] = {
                    "step": torch.tensor(header["adam_steps"][name]),
                    "exp_avg": tensors[f"adam_m/{name}"],
                    "exp_avg_sq": tensors[f"adam_v/{name}"],
                }
        trainer.optimizer.load_state_dict(opt_state)
        trainer.rng.bit_generator.state = header["numpy_rng"]
        raw = np.frombuffer(base64.b64decode(header["torch_rng"]), dtype=np.uint8).copy()
        trainer.generator.set_state(torch.from_numpy(raw))
        trainer.step = int(header["step"])
        return trainer


def grad_norm(model: torch.nn.Module) -> float:
    grads = [p.grad.detach().reshape(-1) for p in model.parameters() if p.grad is not None]
    return float(torch.linalg.vector_norm(torch.cat(grads))) if grads else 0.0


def load_model(path: str | Path, model_cfg: ModelConfig | None = None) -> tuple[PiDiMT, RunConfig]:
    """Model (eval mode) and run config from a checkpoint."""
    tensors, header = read_checkpoint(path)
    saved = RunConfig.from_dict(header["config"])
    if model_cfg is not None and model_cfg != saved.model:
        raise LoadError("architecture mismatch between checkpoint and config")
    model = PiDiMT(saved.model)
    state = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise LoadError(f"architecture mismatch: {exc}") from None
    return model.eval(), saved


def train(cfg: RunConfig, out_dir: str | Path | None = None, resume: str | Path | None = None,
          scenarios=None) -> Trainer:
    """Run ``cfg.train.steps`` optimizer steps over a synthetic scenario pool."""
    cfg.validate()
    tc = cfg.train
    if scenarios is None:
        scenarios = scenario_pool(tc.n_scenarios, tc.seed, tc.kinds, scene_limits(cfg.model), cfg.model.future)
    if not scenarios:
        raise ConfigError("n_scenarios: scenario pool is empty")
    trainer = Trainer.load(resume, cfg) if resume else Trainer.create(cfg)
    batch, target = batch_targets(scenarios, scene_limits(cfg.model))
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    n = batch.batch_size
    while trainer.step < tc.steps:
        if tc.batch_size >= n:
            b, tg = batch, target
        else:
            idx = torch.as_tensor(np.sort(trainer.rng.choice(n, tc.batch_size, replace=False)))
            b, tg = batch.index(idx), target[idx]
        loss = trainer.train_step(b, tg)
        if tc.log_every and trainer.step % tc.log_every == 0:
            log.info("step %d loss %.5f denoise %.5f lr %.2e", trainer.step, loss,
                     trainer.denoise_losses[-1], learning_rate(trainer.step - 1, cfg))
        if out and tc.checkpoint_every and trainer.step % tc.checkpoint_every == 0:
            trainer.save(out / f"step_{trainer.step:06d}.ckpt")
    if out:
        trainer.save(out / "final.ckpt")
    return trainer
