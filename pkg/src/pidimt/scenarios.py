"""Synthetic kinematic driving scenarios.

Every track is integrated with ``v_k`` from a speed/yaw-rate profile and
``x_k = x_{k-1} + v_k * dt``, so the backward difference of stored positions
reproduces the stored velocity exactly.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import ConfigError
from .scene import (AgentTrack, EgoFrame, LaneElement, Scene, SceneBatch, SceneLimits, StaticObject,
                    collate, rotate_future, scene_from_dict, scene_to_dict)

KINDS = ("constant_velocity", "constant_accel", "lane_follow_turn", "stop", "u_turn")
LANE_WIDTH_M = 3.5


@dataclass
class Scenario:
    scene: Scene
    future: np.ndarray  # (1 + n_agents, F, 4) world-frame (x, y, vx, vy), ego first
    kind: str
    seed: int

    def to_dict(self) -> dict:
        d = scene_to_dict(self.scene)
        d.update(future=self.future.tolist(), kind=self.kind, seed=self.seed)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        return cls(scene_from_dict(d), np.asarray(d["future"], dtype=np.float64), d["kind"], int(d["seed"]))


@dataclass
class Profile:
    """Speed (m/s) and yaw rate (rad/s) as functions of time relative to the current frame."""

    speed: float
    accel: float = 0.0
    heading: float = 0.0
    yaw_rate: float = 0.0
    turn_start: float = 0.0
    turn_end: float = 0.0
    stop_after: float | None = None
    steady_history: bool = False  # accelerate only after the current frame

    def speed_at(self, tau: np.ndarray) -> np.ndarray:
        if self.stop_after is not None:
            tau = np.clip(tau, 0.0, self.stop_after)
        elif self.steady_history:
            tau = np.maximum(tau, 0.0)
        return np.maximum(self.speed + self.accel * tau, 0.0)

    def omega_at(self, tau: np.ndarray) -> np.ndarray:
        return np.where((tau > self.turn_start) & (tau <= self.turn_end), self.yaw_rate, 0.0)


def integrate(profile: Profile, origin: np.ndarray, n_hist: int, n_future: int, dt: float) -> np.ndarray:
    """States (n_hist + n_future, 6) = (x, y, cos, sin, vx, vy); row ``n_hist - 1`` is the current frame."""
    k = np.arange(n_hist + n_future)
    tau = (k - (n_hist - 1)) * dt
    speed = profile.speed_at(tau)
    omega = profile.omega_at(tau)
    theta = np.empty_like(tau)
    c = n_hist - 1
    theta[c] = profile.heading
    for i in range(c + 1, len(k)):
        theta[i] = theta[i - 1] + omega[i] * dt
    for i in range(c - 1, -1, -1):
        theta[i] = theta[i + 1] - omega[i + 1] * dt
    vel = speed[:, None] * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    pos = np.empty((len(k), 2))
    pos[c] = origin
    for i in range(c + 1, len(k)):
        pos[i] = pos[i - 1] + vel[i] * dt
    for i in range(c - 1, -1, -1):
        pos[i] = pos[i + 1] - vel[i + 1] * dt
    return np.concatenate([pos, np.cos(theta)[:, None], np.sin(theta)[:, None], vel], axis=1)


def ego_profile(kind: str, rng: np.random.Generator, overrides: dict) -> Profile:
    if kind == "constant_velocity":
        p = Profile(speed=rng.uniform(3.0, 12.0))
    elif kind == "constant_accel":
        a = rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 2.0)
        p = Profile(speed=rng.uniform(6.0, 10.0), accel=a)
    elif kind == "lane_follow_turn":
        angle = rng.choice([-1.0, 1.0]) * math.pi / 2
        start = rng.uniform(0.0, 1.0)
        dur = rng.uniform(2.0, 3.0)
        p = Profile(speed=rng.uniform(4.0, 8.0), yaw_rate=angle / dur, turn_start=start, turn_end=start + dur)
    elif kind == "stop":
        s = rng.uniform(4.0, 10.0)
        t_stop = rng.uniform(1.5, 3.5)
        p = Profile(speed=s, accel=-s / t_stop, stop_after=t_stop)
    elif kind == "u_turn":
        start = rng.uniform(0.0, 0.5)
        dur = rng.uniform(3.0, 3.5)
        p = Profile(speed=rng.uniform(2.5, 4.0), yaw_rate=rng.choice([-1.0, 1.0]) * math.pi / dur,
                    turn_start=start, turn_end=start + dur)
    else:
        raise ConfigError(f"kind: unknown scenario kind {kind!r}; expected one of {KINDS}")
    p.heading = rng.uniform(-math.pi, math.pi)
    for k, v in overrides.items():
        if not hasattr(p, k):
            raise ConfigError(f"{k}: not a profile parameter")
        setattr(p, k, v)
    return p


def _lane_from_path(path: np.ndarray, n_points: int, rng: np.random.Generator) -> LaneElement:
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] < 1e-6:
        heading = np.array([1.0, 0.0])
        pts = path[:1] + np.linspace(-5, 5, n_points)[:, None] * heading
    else:
        target = np.linspace(0.0, s[-1], n_points)
        pts = np.stack([np.interp(target, s, path[:, 0]), np.interp(target, s, path[:, 1])], axis=1)
    tangent = np.gradient(pts, axis=0)
    tangent /= np.maximum(np.linalg.norm(tangent, axis=1, keepdims=True), 1e-9)
    normal = np.stack([-tangent[:, 1], tangent[:, 0]], axis=1)
    half = LANE_WIDTH_M / 2
    points = np.concatenate([pts, tangent, half * normal, -half * normal], axis=1)
    state = rng.choice(["green", "yellow", "red", "unknown"], p=[0.6, 0.1, 0.1, 0.2])
    limit = None if rng.random() < 0.3 else float(rng.choice([8.3, 13.9, 16.7]))
    return LaneElement(points, str(state), limit)


def generate_scenario(kind: str, seed: int, limits: SceneLimits | None = None, future: int = 40,
                      dt: float = 0.1, **overrides) -> Scenario:
    """Deterministic scenario of ``kind`` for ``seed``; ``overrides`` set ego profile fields."""
    if kind not in KINDS:
        raise ConfigError(f"kind: unknown scenario kind {kind!r}; expected one of {KINDS}")
    limits = limits or SceneLimits()
    rng = np.random.default_rng([seed, KINDS.index(kind)])
    V, F = limits.history, future
    prof = ego_profile(kind, rng, overrides)
    origin = np.zeros(2) if overrides else rng.uniform(-50.0, 50.0, size=2)
    ego_states = integrate(prof, origin, V, F, dt)
    dims = np.array([1.9, 4.6])

    def track(states, valid, agent_type, wl):
        frames = np.concatenate([states[:V, :6], np.tile(wl, (V, 1))], axis=1)
        return AgentTrack(frames, valid, agent_type)

    ego = track(ego_states, np.ones(V, dtype=bool), "vehicle", dims)
    heading = np.array([math.cos(prof.heading), math.sin(prof.heading)])
    normal = np.array([-heading[1], heading[0]])

    agents, futures = [], [ego_states[V:, [0, 1, 4, 5]]]
    n_agents = int(rng.integers(1, limits.neighbors + 3))
    for _ in range(n_agents):
        lane_off = float(rng.choice([-1, 0, 1])) * LANE_WIDTH_M
        lon = rng.uniform(-30.0, 30.0)
        if lane_off == 0.0 and abs(lon) < 8.0:
            lon += 12.0 * np.sign(lon or 1.0)
        agent_type = str(rng.choice(["vehicle", "vehicle", "vehicle", "bicycle", "pedestrian"]))
        speed = {"vehicle": rng.uniform(2.0, 12.0), "bicycle": rng.uniform(2.0, 5.0),
                 "pedestrian": rng.uniform(0.5, 1.5)}[agent_type]
        ap = Profile(speed=speed, accel=rng.uniform(-0.5, 0.5), heading=prof.heading)
        ap.speed = max(ap.speed, abs(ap.accel) * (V + F) * dt)
        start = origin + lon * heading + lane_off * normal
        st = integrate(ap, start, V, F, dt)
        valid = np.ones(V, dtype=bool)
        if rng.random() < 0.3:
            valid[: int(rng.integers(1, V - 1))] = False
        if rng.random() < 0.1:
            valid[-1] = False  # not observed now: dropped from the trajectory set
        wl = {"vehicle": dims, "bicycle": np.array([0.7, 1.8]), "pedestrian": np.array([0.6, 0.6])}[agent_type]
        agents.append(track(st, valid, agent_type, wl))
        futures.append(st[V:, [0, 1, 4, 5]])

    path = ego_states[:, :2]
    lanes = [_lane_from_path(path, limits.lane_points, rng)]
    for off in (-LANE_WIDTH_M, LANE_WIDTH_M):
        lanes.append(_lane_from_path(path + off * _path_normals(path), limits.lane_points, rng))
    statics = []
    for _ in range(int(rng.integers(0, limits.statics + 1))):
        lon = rng.uniform(-20.0, 40.0)
        side = rng.choice([-1.0, 1.0]) * rng.uniform(6.0, 9.0)
        pos = origin + lon * heading + side * normal
        statics.append(StaticObject(np.array([pos[0], pos[1], heading[0], heading[1], 1.8, 4.5]),
                                    str(rng.choice(["czone_sign", "barrier", "traffic_cone", "generic_object"]))))
    scene = Scene(ego, agents, statics, lanes, route=[0], frequency_hz=1.0 / dt)
    return Scenario(scene, np.stack(futures), kind, seed)


def _path_normals(path: np.ndarray) -> np.ndarray:
    tangent = np.gradient(path, axis=0)
    norm = np.linalg.norm(tangent, axis=1, keepdims=True)
    tangent = np.where(norm > 1e-9, tangent / np.maximum(norm, 1e-9), np.array([1.0, 0.0]))
    return np.stack([-tangent[:, 1], tangent[:, 0]], axis=1)


def scenario_pool(n: int, seed: int, kinds=KINDS, limits: SceneLimits | None = None, future: int = 40) -> list[Scenario]:
    """``n`` scenarios cycling through ``kinds`` with per-scenario seeds derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(n)
    return [generate_scenario(kinds[i % len(kinds)], int(seeds[i]), limits, future) for i in range(n)]


def save_scenarios(scenarios: list[Scenario], path: str | Path) -> None:
    Path(path).write_text(json.dumps([s.to_dict() for s in scenarios]))


def load_scenarios(path: str | Path) -> list[Scenario]:
    return [Scenario.from_dict(d) for d in json.loads(Path(path).read_text())]


def batch_targets(scenarios: list[Scenario], limits: SceneLimits) -> tuple[SceneBatch, torch.Tensor]:
    """Collate scenes and align ego-frame ground truth as (B, 1+K, 1+F, 4), frame 0 = current."""
    batch, slots = collate([s.scene for s in scenarios], limits)
    F = scenarios[0].future.shape[1]
    target = np.zeros((len(scenarios), 1 + limits.neighbors, 1 + F, 4))
    for b, (sc, picked) in enumerate(zip(scenarios, slots)):
        f = sc.scene.ego.frames[-1]
        ef = EgoFrame(f[0], f[1], f[2], f[3])
        fut = rotate_future(sc.future, ef)
        for a, src in enumerate([0] + [i + 1 for i in picked]):
            target[b, a, 1:] = fut[src]
    target = torch.as_tensor(target, dtype=torch.float32)
    target[:, :, 0] = batch.current
    target = target * batch.agent_valid[:, :, None, None].to(target.dtype)
    return batch, target
