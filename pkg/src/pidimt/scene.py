"""Scene schema, JSON I/O, ego-frame normalization and batching.

A scene file is a JSON object::

    {
      "frequency_hz": 10.0,
      "ego":    {"frames": [[x, y, cos, sin, vx, vy, w, l], ...], "valid": [true, ...], "type": "vehicle"},
      "agents": [ same layout as ego, one per neighbour ],
      "statics": [{"feature": [x, y, cos, sin, w, l], "type": "barrier"}, ...],
      "lanes":  [{"points": [[x, y, cos, sin, lx, ly, rx, ry], ...],
                  "traffic_state": "green", "speed_limit": 13.9 | null}, ...],
      "route":  [lane indices forming the intended route]
    }

Agent frames cover the history window, oldest first; the last frame is the
current timestep. ``lx, ly`` / ``rx, ry`` are left/right boundary offsets from
the centerline point and ``cos, sin`` the lane tangent. Scenario files add
``"future": [[[x, y, vx, vy], ...F], ...]`` (ego first, then agents in file
order), ``"kind"`` and ``"seed"``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

AGENT_TYPES = ("vehicle", "pedestrian", "bicycle")
STATIC_TYPES = ("czone_sign", "barrier", "traffic_cone", "generic_object")
TRAFFIC_STATES = ("green", "yellow", "red", "unknown")

AGENT_WIDTH = 8
STATIC_WIDTH = 6
LANE_WIDTH = 8
META_WIDTH = 7
STATE_CHANNELS = 4


class SceneError(ValueError):
    """Malformed or unusable scene input."""


def _onehot(value: str, vocab: tuple[str, ...]) -> np.ndarray:
    if value not in vocab:
        raise SceneError(f"unknown category {value!r}; expected one of {vocab}")
    out = np.zeros(len(vocab))
    out[vocab.index(value)] = 1.0
    return out


@dataclass
class AgentTrack:
    frames: np.ndarray  # (V, 8)
    frame_valid: np.ndarray  # (V,) bool
    agent_type: str = "vehicle"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64).reshape(-1, AGENT_WIDTH)
        self.frame_valid = np.asarray(self.frame_valid, dtype=bool).reshape(-1)
        if len(self.frame_valid) != len(self.frames):
            raise SceneError("agent frames and validity flags differ in length")
        _onehot(self.agent_type, AGENT_TYPES)

    @property
    def valid(self) -> bool:
        """Valid at the current (last) frame."""
        return bool(self.frame_valid[-1])

    @property
    def type_onehot(self) -> np.ndarray:
        return _onehot(self.agent_type, AGENT_TYPES)

    def current_state(self) -> np.ndarray:
        f = self.frames[-1]
        return np.array([f[0], f[1], f[4], f[5]])


@dataclass
class StaticObject:
    feature: np.ndarray  # (6,)
    obj_type: str = "generic_object"

    def __post_init__(self):
        self.feature = np.asarray(self.feature, dtype=np.float64).reshape(STATIC_WIDTH)
        _onehot(self.obj_type, STATIC_TYPES)


@dataclass
class LaneElement:
    points: np.ndarray  # (L, 8)
    traffic_state: str = "unknown"
    speed_limit: float | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, LANE_WIDTH)
        if len(self.points) < 2:
            raise SceneError("a lane needs at least two points")
        _onehot(self.traffic_state, TRAFFIC_STATES)


@dataclass
class Scene:
    ego: AgentTrack
    agents: list[AgentTrack] = field(default_factory=list)
    statics: list[StaticObject] = field(default_factory=list)
    lanes: list[LaneElement] = field(default_factory=list)
    route: list[int] = field(default_factory=list)
    frequency_hz: float = 10.0

    @property
    def dt(self) -> float:
        return 1.0 / self.frequency_hz


# --------------------------------------------------------------------- JSON


def _track_from_json(d: dict) -> AgentTrack:
    frames = np.asarray(d["frames"], dtype=np.float64)
    valid = d.get("valid", [True] * len(frames))
    return AgentTrack(frames, np.asarray(valid, dtype=bool), d.get("type", "vehicle"))


def _track_to_json(t: AgentTrack) -> dict:
    return {"frames": t.frames.tolist(), "valid": t.frame_valid.tolist(), "type": t.agent_type}


def scene_from_dict(d: dict) -> Scene:
    missing = {"ego", "agents", "statics", "lanes", "route", "frequency_hz"} - set(d)
    if missing:
        raise SceneError(f"scene is missing keys: {sorted(missing)}")
    scene = Scene(
        ego=_track_from_json(d["ego"]),
        agents=[_track_from_json(a) for a in d["agents"]],
        statics=[StaticObject(s["feature"], s.get("type", "generic_object")) for s in d["statics"]],
        lanes=[LaneElement(l["points"], l.get("traffic_state", "unknown"), l.get("speed_limit"))
               for l in d["lanes"]],
        route=[int(i) for i in d["route"]],
        frequency_hz=float(d["frequency_hz"]),
    )
    for i in scene.route:
        if not 0 <= i < len(scene.lanes):
            raise SceneError(f"route references lane {i} but scene has {len(scene.lanes)} lanes")
    return scene


def scene_to_dict(scene: Scene) -> dict:
    return {
        "frequency_hz": scene.frequency_hz,
        "ego": _track_to_json(scene.ego),
        "agents": [_track_to_json(a) for a in scene.agents],
        "statics": [{"feature": s.feature.tolist(), "type": s.obj_type} for s in scene.statics],
        "lanes": [{"points": l.points.tolist(), "traffic_state": l.traffic_state,
                   "speed_limit": l.speed_limit} for l in scene.lanes],
        "route": list(scene.route),
    }


def load_scene(path: str | Path) -> Scene:
    return scene_from_dict(json.loads(Path(path).read_text()))


def save_scene(scene: Scene, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene)))


# ------------------------------------------------------------ normalization


class EgoFrame:
    """Rigid transform into the ego frame at the current timestep."""

    def __init__(self, x: float, y: float, cos: float, sin: float):
        norm = np.hypot(cos, sin)
        if not np.isfinite([x, y, cos, sin]).all() or norm == 0:
            raise SceneError("ego pose is not finite")
        self.origin = np.array([x, y])
        self.c, self.s = cos / norm, sin / norm

    def rotate(self, v: np.ndarray) -> np.ndarray:
        """Express world-frame direction vectors ``(..., 2)`` in the ego frame."""
        c, s = self.c, self.s
        return np.stack([c * v[..., 0] + s * v[..., 1], -s * v[..., 0] + c * v[..., 1]], axis=-1)

    def points(self, p: np.ndarray) -> np.ndarray:
        return self.rotate(p - self.origin)

    def unrotate(self, v: np.ndarray) -> np.ndarray:
        c, s = self.c, self.s
        return np.stack([c * v[..., 0] - s * v[..., 1], s * v[..., 0] + c * v[..., 1]], axis=-1)

    def states_to_world(self, states: np.ndarray) -> np.ndarray:
        """Ego-frame ``(..., 4)`` states ``(x, y, vx, vy)`` back to world coordinates."""
        return np.concatenate([self.unrotate(states[..., :2]) + self.origin, self.unrotate(states[..., 2:4])],
                              axis=-1)


def _norm_track(t: AgentTrack, ef: EgoFrame) -> AgentTrack:
    f = t.frames.copy()
    f[:, 0:2] = ef.points(f[:, 0:2])
    f[:, 2:4] = ef.rotate(f[:, 2:4])
    f[:, 4:6] = ef.rotate(f[:, 4:6])
    f[~t.frame_valid] = 0.0
    return AgentTrack(f, t.frame_valid.copy(), t.agent_type)


def normalize_scene(scene: Scene, ego_pose: tuple[float, float, float, float] | None = None) -> Scene:
    """Express every position, heading and velocity in the ego frame.

    ``ego_pose`` is ``(x, y, cos, sin)``; it defaults to the ego's current frame.
    Entries flagged missing are zero-filled.
    """
    if ego_pose is None:
        if not scene.ego.valid:
            raise SceneError("ego has no valid current state")
        f = scene.ego.frames[-1]
        ego_pose = (f[0], f[1], f[2], f[3])
    ef = EgoFrame(*ego_pose)

    statics = []
    for s in scene.statics:
        feat = s.feature.copy()
        feat[0:2] = ef.points(feat[0:2])
        feat[2:4] = ef.rotate(feat[2:4])
        statics.append(StaticObject(feat, s.obj_type))
    lanes = []
    for lane in scene.lanes:
        p = lane.points.copy()
        p[:, 0:2] = ef.points(p[:, 0:2])
        for sl in (slice(2, 4), slice(4, 6), slice(6, 8)):
            p[:, sl] = ef.rotate(p[:, sl])
        lanes.append(LaneElement(p, lane.traffic_state, lane.speed_limit))
    return Scene(
        ego=_norm_track(scene.ego, ef),
        agents=[_norm_track(a, ef) for a in scene.agents],
        statics=statics,
        lanes=lanes,
        route=list(scene.route),
        frequency_hz=scene.frequency_hz,
    )


def rotate_future(future: np.ndarray, ef: EgoFrame) -> np.ndarray:
    """Map ``(..., 4)`` world-frame ``(x, y, vx, vy)`` states into the ego frame."""
    out = np.array(future, dtype=np.float64, copy=True)
    out[..., 0:2] = ef.points(out[..., 0:2])
    out[..., 2:4] = ef.rotate(out[..., 2:4])
    return out


# ------------------------------------------------------------------ batching


@dataclass
class SceneLimits:
    history: int = 21  # V
    neighbors: int = 8  # K
    statics: int = 8
    lanes: int = 16
    lane_points: int = 20  # L
    route_lanes: int = 4


@dataclass
class SceneBatch:
    """Padded, ego-frame tensors for a batch of scenes (f32 unless noted)."""

    agent_feats: torch.Tensor  # (B, A, V, 8)
    agent_frame_mask: torch.Tensor  # (B, A, V) bool
    agent_type: torch.Tensor  # (B, A, 3)
    agent_valid: torch.Tensor  # (B, A) bool, valid at current frame
    static_feats: torch.Tensor  # (B, Ns, 6)
    static_type: torch.Tensor  # (B, Ns, 4)
    static_valid: torch.Tensor  # (B, Ns)
    lane_pts: torch.Tensor  # (B, Nl, L, 8)
    lane_traffic: torch.Tensor  # (B, Nl, 4)
    lane_speed: torch.Tensor  # (B, Nl)
    lane_speed_known: torch.Tensor  # (B, Nl) bool
    lane_valid: torch.Tensor  # (B, Nl)
    route_pts: torch.Tensor  # (B, Nr, L, 8)
    route_traffic: torch.Tensor  # (B, Nr, 4)
    route_speed: torch.Tensor  # (B, Nr)
    route_speed_known: torch.Tensor  # (B, Nr)
    route_valid: torch.Tensor  # (B, Nr)
    current: torch.Tensor  # (B, A, 4) observed (x, y, vx, vy)
    dt: float = 0.1

    @property
    def batch_size(self) -> int:
        return self.agent_feats.shape[0]

    @property
    def n_agents(self) -> int:
        return self.agent_feats.shape[1]

    def to(self, dtype: torch.dtype) -> "SceneBatch":
        kw = {}
        for name, v in self.__dict__.items():
            kw[name] = v.to(dtype) if isinstance(v, torch.Tensor) and v.is_floating_point() else v
        return SceneBatch(**kw)

    def index(self, idx) -> "SceneBatch":
        kw = {k: (v[idx] if isinstance(v, torch.Tensor) else v) for k, v in self.__dict__.items()}
        return SceneBatch(**kw)


def _resample(points: np.ndarray, n: int) -> np.ndarray:
    if len(points) == n:
        return points
    src = np.linspace(0.0, 1.0, len(points))
    dst = np.linspace(0.0, 1.0, n)
    return np.stack([np.interp(dst, src, points[:, c]) for c in range(points.shape[1])], axis=1)


def select_neighbors(scene: Scene, k: int) -> list[int]:
    """Indices of the ``k`` nearest agents valid at the current frame (normalized scene)."""
    cand = [(float(np.hypot(*a.frames[-1, :2])), i) for i, a in enumerate(scene.agents) if a.valid]
    return [i for _, i in sorted(cand)[:k]]


def _encode_lanes(lanes: list[LaneElement], n: int, L: int):
    pts = np.zeros((n, L, LANE_WIDTH))
    traffic = np.zeros((n, len(TRAFFIC_STATES)))
    speed = np.zeros(n)
    known = np.zeros(n, dtype=bool)
    valid = np.zeros(n, dtype=bool)
    for j, lane in enumerate(lanes[:n]):
        pts[j] = _resample(lane.points, L)
        traffic[j] = _onehot(lane.traffic_state, TRAFFIC_STATES)
        if lane.speed_limit is not None:
            speed[j], known[j] = float(lane.speed_limit), True
        valid[j] = True
    return pts, traffic, speed, known, valid


def collate(scenes: list[Scene], limits: SceneLimits, normalized: bool = False) -> tuple[SceneBatch, list[list[int]]]:
    """Pad and stack scenes into a :class:`SceneBatch`.

    Returns the batch and, per scene, the original agent index of every
    neighbour slot (ego excluded) so that ground-truth futures can be aligned.
    """
    if not scenes:
        raise SceneError("empty scene batch")
    B, A, V = len(scenes), 1 + limits.neighbors, limits.history
    agent_feats = np.zeros((B, A, V, AGENT_WIDTH))
    frame_mask = np.zeros((B, A, V), dtype=bool)
    agent_type = np.zeros((B, A, len(AGENT_TYPES)))
    statics = np.zeros((B, limits.statics, STATIC_WIDTH))
    static_type = np.zeros((B, limits.statics, len(STATIC_TYPES)))
    static_valid = np.zeros((B, limits.statics), dtype=bool)
    lanes = [None] * B
    route = [None] * B
    current = np.zeros((B, A, STATE_CHANNELS))
    slots = []
    dts = set()
    for b, raw in enumerate(scenes):
        sc = raw if normalized else normalize_scene(raw)
        dts.add(sc.dt)
        picked = select_neighbors(sc, limits.neighbors)
        slots.append(picked)
        for a, track in enumerate([sc.ego] + [sc.agents[i] for i in picked]):
            n = min(V, len(track.frames))
            agent_feats[b, a, V - n:] = track.frames[-n:]
            frame_mask[b, a, V - n:] = track.frame_valid[-n:]
            agent_type[b, a] = track.type_onehot
            current[b, a] = track.current_state()
        agent_feats[b][~frame_mask[b]] = 0.0
        for j, s in enumerate(sc.statics[: limits.statics]):
            statics[b, j] = s.feature
            static_type[b, j] = _onehot(s.obj_type, STATIC_TYPES)
            static_valid[b, j] = True
        lanes[b] = _encode_lanes(sc.lanes, limits.lanes, limits.lane_points)
        route[b] = _encode_lanes([sc.lanes[i] for i in sc.route], limits.route_lanes, limits.lane_points)
    if len(dts) != 1:
        raise SceneError(f"scenes in one batch must share a frame rate, got {sorted(dts)}")
    if not frame_mask[:, 0, -1].all():
        raise SceneError("every scene needs a valid ego current state")

    f32 = lambda a: torch.as_tensor(a, dtype=torch.float32)  # noqa: E731
    boolean = lambda a: torch.as_tensor(a, dtype=torch.bool)  # noqa: E731
    stack = lambda parts, i: np.stack([p[i] for p in parts])  # noqa: E731
    batch = SceneBatch(
        agent_feats=f32(agent_feats),
        agent_frame_mask=boolean(frame_mask),
        agent_type=f32(agent_type),
        agent_valid=boolean(frame_mask[:, :, -1]),
        static_feats=f32(statics),
        static_type=f32(static_type),
        static_valid=boolean(static_valid),
        lane_pts=f32(stack(lanes, 0)),
        lane_traffic=f32(stack(lanes, 1)),
        lane_speed=f32(stack(lanes, 2)),
        lane_speed_known=boolean(stack(lanes, 3)),
        lane_valid=boolean(stack(lanes, 4)),
        route_pts=f32(stack(route, 0)),
        route_traffic=f32(stack(route, 1)),
        route_speed=f32(stack(route, 2)),
        route_speed_known=boolean(stack(route, 3)),
        route_valid=boolean(stack(route, 4)),
        current=f32(current),
        dt=dts.pop(),
    )
    return batch, slots
