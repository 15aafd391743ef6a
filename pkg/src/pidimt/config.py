"""Run configuration: dataclasses, plain-text ``key = value`` files and overrides."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .backbone import SUBPATHS, ConfigError


@dataclass
class ModelConfig:
    d: int = 192
    n_heads: int = 6
    n_blocks: int = 4
    n_state: int = 16
    n_shallow: int = 4
    n_deep: int = 1
    top_k: int = 2
    mixer_depth: int = 2
    fusion_depth: int = 3
    history: int = 21
    neighbors: int = 8
    statics: int = 8
    lanes: int = 16
    lane_points: int = 20
    route_lanes: int = 4
    future: int = 40
    block_order: tuple[str, ...] = SUBPATHS
    residual_downscale: bool = False
    accel_hidden: int = 64
    a_max: float = 8.0
    pos_scale: float = 16.0
    vel_scale: float = 8.0

    def validate(self) -> None:
        if self.d <= 0 or self.d % self.n_heads:
            raise ConfigError(f"d: {self.d} must be a positive multiple of n_heads={self.n_heads}")
        if not 1 <= self.top_k <= self.n_shallow:
            raise ConfigError(f"top_k: {self.top_k} must lie in [1, n_shallow={self.n_shallow}]")
        if sorted(self.block_order) != sorted(SUBPATHS):
            raise ConfigError(f"block_order: must be a permutation of {SUBPATHS}")
        for name in ("n_blocks", "n_state", "history", "lane_points", "future"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        if self.lane_points < 2:
            raise ConfigError("lane_points: must be >= 2")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 3e-4
    weight_decay: float = 0.01
    warmup: int = 1000
    min_lr_frac: float = 0.1
    grad_clip: float = 1.0
    depth_lr_scaling: bool = True
    gate_noise_sigma0: float = 1.0
    gate_noise_end_frac: float = 0.5
    mode: str = "clean_signal"
    time_sampling: str = "uniform"
    t_min: float = 1e-3
    ph_loss_weight: float = 1.0
    checkpoint_every: int = 500
    log_every: int = 100
    seed: int = 0
    n_scenarios: int = 32
    kinds: tuple[str, ...] = ("constant_velocity", "constant_accel", "lane_follow_turn", "stop", "u_turn")

    def validate(self) -> None:
        if self.steps < 1:
            raise ConfigError("steps: must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr: must be > 0")
        if self.grad_clip <= 0:
            raise ConfigError("grad_clip: must be > 0")
        if self.mode not in ("clean_signal", "scaled_noise"):
            raise ConfigError(f"mode: {self.mode!r} is not clean_signal or scaled_noise")
        if not 0 < self.t_min < 1:
            raise ConfigError("t_min: must lie in (0, 1)")
        if self.n_scenarios < 1:
            raise ConfigError("n_scenarios: scenario pool must be non-empty")


@dataclass
class SampleConfig:
    steps: int = 10
    temperature: float = 0.5
    seed: int = 0
    phnn: bool = True
    ph_steps: int = 10
    ph_anchor: int = 10
    ph_dt: float = 0.1
    ph_impulse: str = "dt_scaled"
    ph_semi_implicit: bool = False
    ph_per_step: bool = False
    t_min: float = 1e-3


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls()
        for section in ("model", "train", "sample"):
            for k, v in d.get(section, {}).items():
                set_field(getattr(cfg, section), k, v)
        return cfg


def _coerce(current, value):
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        s = str(value).strip().lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        if isinstance(value, (list, tuple)):
            return tuple(value)
        return tuple(s.strip() for s in str(value).split(",") if s.strip())
    return value if isinstance(value, str) else str(value)


def set_field(obj, key: str, value) -> None:
    names = {f.name for f in fields(obj)}
    if key not in names:
        raise ConfigError(f"{key}: unknown key for {type(obj).__name__}")
    try:
        setattr(obj, key, _coerce(getattr(obj, key), value))
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def apply_override(cfg: RunConfig, key: str, value) -> None:
    """Set ``section.key`` or a bare ``key`` (searched in model, train, sample order)."""
    key = key.replace("-", "_")
    if "." in key:
        section, name = key.split(".", 1)
        if section not in ("model", "train", "sample"):
            raise ConfigError(f"{key}: unknown section {section!r}")
        set_field(getattr(cfg, section), name, value)
        return
    for section in ("model", "train", "sample"):
        obj = getattr(cfg, section)
        if key in {f.name for f in fields(obj)}:
            set_field(obj, key, value)
            return
    raise ConfigError(f"{key}: unknown configuration key")


def parse_config_text(text: str, cfg: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment, ``[section]`` headers are allowed."""
    cfg = cfg or RunConfig()
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        apply_override(cfg, f"{section}.{k}" if section else k, v)
    return cfg


def load_config(path: str | Path | None = None, overrides: dict | None = None,
                base: RunConfig | None = None) -> RunConfig:
    """File over ``base`` (default :class:`RunConfig`), then ``DIMT_SEED``, then ``overrides``."""
    cfg = base or RunConfig()
    if path:
        cfg = parse_config_text(Path(path).read_text(), cfg)
    seed = os.environ.get("DIMT_SEED")
    if seed is not None:
        cfg.train.seed = int(seed)
        cfg.sample.seed = int(seed)
    for k, v in (overrides or {}).items():
        apply_override(cfg, k, v)
    cfg.validate()
    return cfg


def desk_config() -> RunConfig:
    """Reduced model used by the acceptance runs on a single CPU core."""
    cfg = RunConfig()
    m = cfg.model
    m.d, m.n_heads, m.n_blocks, m.n_state = 48, 6, 2, 8
    m.fusion_depth, m.mixer_depth = 1, 1
    m.neighbors, m.statics, m.lanes = 3, 4, 6
    m.history, m.future, m.lane_points = 11, 16, 12
    m.accel_hidden = 32
    t = cfg.train
    t.lr, t.warmup, t.batch_size = 2e-3, 200, 16
    return cfg
