"""Trajectory metrics (ego frame, SI units)."""
from __future__ import annotations

import numpy as np


class MetricError(ValueError):
    pass


def _positions(traj) -> np.ndarray:
    arr = np.asarray(traj, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] < 2:
        raise MetricError(f"expected (T, >=2) trajectory, got shape {arr.shape}")
    return arr[:, :2]


def jerk_metric(traj, dt: float) -> float:
    """Mean norm of the third finite difference of position over ``dt**3``."""
    pos = _positions(traj)
    if len(pos) < 4:
        raise MetricError("jerk needs at least 4 frames")
    d3 = np.diff(pos, n=3, axis=0) / dt**3
    return float(np.linalg.norm(d3, axis=1).mean())


def accel_metric(traj, dt: float) -> float:
    """Mean norm of the second finite difference of position over ``dt**2``."""
    pos = _positions(traj)
    if len(pos) < 3:
        raise MetricError("acceleration needs at least 3 frames")
    d2 = np.diff(pos, n=2, axis=0) / dt**2
    return float(np.linalg.norm(d2, axis=1).mean())


def displacement_errors(pred, truth) -> tuple[float, float]:
    """(ADE, FDE) between (T, >=2) predicted and ground-truth positions."""
    p, g = _positions(pred), _positions(truth)
    if p.shape != g.shape:
        raise MetricError(f"shape mismatch {p.shape} vs {g.shape}")
    err = np.linalg.norm(p - g, axis=1)
    return float(err.mean()), float(err[-1])
