"""Sampling-based evaluation over a scenario set: displacement, smoothness, anchoring."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig, SampleConfig
from .diffusion import SolverState
from .metrics import accel_metric, displacement_errors, jerk_metric
from .model import PiDiMT
from .planner import sample
from .scenarios import Scenario, batch_targets
from .training import load_model


@dataclass
class ScenarioResult:
    index: int
    kind: str
    seed: int
    ade: float
    fde: float
    accel: float
    jerk: float
    anchor_violations: int


@dataclass
class EvalReport:
    results: list[ScenarioResult]
    metadata: dict = field(default_factory=dict)

    def mean(self, key: str) -> float:
        return float(np.mean([getattr(r, key) for r in self.results])) if self.results else float("nan")

    @property
    def anchor_violations(self) -> int:
        return sum(r.anchor_violations for r in self.results)

    def summary(self) -> dict:
        return {"n": len(self.results), "ade": self.mean("ade"), "fde": self.mean("fde"),
                "accel": self.mean("accel"), "jerk": self.mean("jerk"),
                "anchor_violations": self.anchor_violations}

    def to_dict(self) -> dict:
        return {"metadata": self.metadata, "summary": self.summary(),
                "scenarios": [asdict(r) for r in self.results]}

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def to_csv(self, path: str | Path) -> None:
        names = list(ScenarioResult.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for r in self.results:
                w.writerow([getattr(r, n) for n in names])

    def to_text(self) -> str:
        head = f"{'#':>4} {'kind':<18} {'ADE':>8} {'FDE':>8} {'|a|':>8} {'|j|':>9} {'anchor':>6}"
        lines = [head, "-" * len(head)]
        for r in self.results:
            lines.append(f"{r.index:>4} {r.kind:<18} {r.ade:>8.3f} {r.fde:>8.3f} {r.accel:>8.3f} "
                         f"{r.jerk:>9.3f} {r.anchor_violations:>6d}")
        s = self.summary()
        lines.append("-" * len(head))
        lines.append(f"{'mean':>4} {'':<18} {s['ade']:>8.3f} {s['fde']:>8.3f} {s['accel']:>8.3f} "
                     f"{s['jerk']:>9.3f} {s['anchor_violations']:>6d}")
        return "\n".join(lines)


def sample_scenarios(model: PiDiMT, scenarios: list[Scenario], cfg: SampleConfig, mode: str = "clean_signal",
                     chunk: int = 64) -> tuple[torch.Tensor, torch.Tensor, np.ndarray]:
    """Trajectories, targets and per-scenario anchor violation counts, in chunks with a fixed seed."""
    gen = torch.Generator().manual_seed(cfg.seed)
    trajs, targets, violations = [], [], []
    for lo in range(0, len(scenarios), chunk):
        batch, target = batch_targets(scenarios[lo:lo + chunk], model.limits)
        anchor = model.to_model_units(batch.current)
        valid = batch.agent_valid
        counts = np.zeros(batch.batch_size, dtype=int)

        def watch(k: int, state: SolverState) -> None:
            bad = (state.x[:, :, 0] != anchor).any(-1) & valid
            counts[:] += bad.any(-1).numpy()

        traj = sample(model, batch, cfg, mode, generator=gen, callback=watch)
        final_bad = ((traj[:, :, 0] != batch.current).any(-1) & valid).any(-1)
        counts += final_bad.numpy()
        trajs.append(traj)
        targets.append(target)
        violations.append(counts)
    return torch.cat(trajs), torch.cat(targets), np.concatenate(violations)


def evaluate(model: PiDiMT | str | Path, scenarios: list[Scenario], cfg: SampleConfig = SampleConfig(),
             mode: str | None = None, model_cfg: ModelConfig | None = None) -> EvalReport:
    """Sample every scenario once and score the ego plan against ground truth."""
    meta = {"sample": asdict(cfg)}
    if isinstance(model, (str, Path)):
        meta["checkpoint"] = str(model)
        model, run_cfg = load_model(model, model_cfg)
        mode = mode or run_cfg.train.mode
    mode = mode or "clean_signal"
    meta["mode"] = mode
    dt = 1.0 / scenarios[0].scene.frequency_hz if scenarios else 0.1
    traj, target, violations = sample_scenarios(model, scenarios, cfg, mode)
    return EvalReport(score(traj, target, scenarios, violations, dt), meta)


def score(traj: torch.Tensor, target: torch.Tensor, scenarios: list[Scenario],
          violations: np.ndarray | None = None, dt: float = 0.1) -> list[ScenarioResult]:
    """Per-scenario ego metrics for (B, A, 1+F, 4) trajectories against targets."""
    results = []
    for i, sc in enumerate(scenarios):
        ego, truth = traj[i, 0].double().numpy(), target[i, 0].double().numpy()
        ade, fde = displacement_errors(ego[1:], truth[1:])
        n_bad = 0 if violations is None else int(violations[i])
        results.append(ScenarioResult(i, sc.kind, sc.seed, ade, fde, accel_metric(ego, dt),
                                      jerk_metric(ego, dt), n_bad))
    return results
