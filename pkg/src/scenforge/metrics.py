"""Rewards, trajectory metrics and the scenario difficulty score."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ScenforgeError
from .mapgraph import Polyline

SUCCESS = "Success"
OUT_OF_ROUTE = "OutOfRoute"
OUT_OF_ROAD = "OutOfRoad"
TIMEOUT = "Timeout"
RUNNING = "Running"
ABORTED = "Aborted"

VEHICLE_OR_HUMAN = "vehicle/human"
OBJECT = "object"


@dataclass(frozen=True)
class RewardConfig:
    """Reward coefficients. Penalty magnitudes are positive and enter with a minus sign."""

    mode: str = "single"
    c1: float = 2.0
    c2: float = 1.0
    c3: float = 1.0
    collision_vehicle: float = 2.0
    collision_object: float = 0.5
    success_reward: float = 10.0
    out_of_route_reward: float = -5.0

    @classmethod
    def single(cls, **kw) -> "RewardConfig":
        return cls(mode="single", **kw)

    @classmethod
    def multi(cls, **kw) -> "RewardConfig":
        kw.setdefault("collision_vehicle", 1.0)
        kw.setdefault("out_of_route_reward", -1.0)
        return cls(mode="multi", **kw)

    def __post_init__(self):
        if self.mode not in ("single", "multi"):
            raise ValueError(f"unknown reward mode {self.mode!r}")
        if self.collision_vehicle < 0 or self.collision_object < 0:
            raise ValueError("collision penalty magnitudes must be >= 0")


@dataclass(frozen=True)
class Transition:
    """What one agent did during one step, as seen by the reward function."""

    displacement: float = 0.0
    speed: float = 0.0
    steer: float = 0.0
    collision: str | None = None
    terminal: str | None = None


def displacement_reward(reference, pos_prev, pos_now) -> float:
    """Longitudinal progress along the reference between two positions."""
    ref = reference if isinstance(reference, Polyline) else Polyline(reference)
    s0, _ = ref.project(pos_prev)
    s1, _ = ref.project(pos_now)
    return s1 - s0


def smooth_penalty(v: float, steer: float) -> float:
    """``min(0, 1/v - |steer|)``; a stopped vehicle (v <= 0) gets 0."""
    if v <= 0.0:
        return 0.0
    return min(0.0, 1.0 / v - abs(steer))


def collision_penalty(cfg: RewardConfig, collision: str | None) -> float:
    if collision is None:
        return 0.0
    if collision == OBJECT:
        return cfg.collision_object
    return cfg.collision_vehicle


def terminal_reward(cfg: RewardConfig, terminal: str | None) -> float:
    if terminal == SUCCESS:
        return cfg.success_reward
    if terminal in (OUT_OF_ROUTE, OUT_OF_ROAD):
        return cfg.out_of_route_reward
    return 0.0


def step_reward(cfg: RewardConfig, tr: Transition) -> float:
    terminal = tr.terminal if tr.terminal not in (None, RUNNING) else None
    disp = 0.0 if terminal else tr.displacement
    pen = collision_penalty(cfg, tr.collision)
    r_term = terminal_reward(cfg, terminal)
    if cfg.mode == "multi":
        return disp - pen + r_term
    smooth = 0.0 if terminal else smooth_penalty(tr.speed, tr.steer)
    return cfg.c1 * disp + cfg.c2 * smooth - cfg.c3 * pen + r_term


# -- trajectory metrics ------------------------------------------------------


def _xy(traj) -> np.ndarray:
    a = np.asarray(traj, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] == 0:
        raise ScenforgeError("trajectory must be a non-empty (T, 2+) array")
    return a[:, :2]


def route_completion(agent_traj, gt_traj) -> float:
    """Furthest projected progress of the agent on the GT path, as a fraction."""
    gt = _xy(gt_traj)
    if gt.shape[0] < 2:
        raise ScenforgeError("ground-truth trajectory needs at least 2 points")
    ref = Polyline(gt)
    s, _ = ref.project_many(_xy(agent_traj))
    return float(min(1.0, max(0.0, s.max() / ref.length)))


def average_distance(agent_traj, gt_traj) -> float:
    a = _xy(agent_traj)
    g = _xy(gt_traj)
    t = min(a.shape[0], g.shape[0])
    return float(np.mean(np.hypot(a[:t, 0] - g[:t, 0], a[:t, 1] - g[:t, 1])))


def final_distance(agent_traj, gt_traj) -> float:
    a = _xy(agent_traj)
    g = _xy(gt_traj)
    return float(math.hypot(a[-1, 0] - g[-1, 0], a[-1, 1] - g[-1, 1]))


def wrap_angle(a):
    return (np.asarray(a, dtype=np.float64) + math.pi) % (2.0 * math.pi) - math.pi


def difficulty_parts(track) -> tuple[float, float]:
    """(track_length, cumulative_curvature) over the valid frames of a track."""
    valid = np.asarray(track.valid, dtype=bool)
    pos = np.asarray(track.position, dtype=np.float64)[valid]
    hd = np.asarray(track.heading, dtype=np.float64)[valid]
    if pos.shape[0] < 2:
        raise ScenforgeError("difficulty needs at least 2 valid frames")
    length = float(np.sum(np.hypot(np.diff(pos[:, 0]), np.diff(pos[:, 1]))))
    curvature = float(np.sum(np.abs(wrap_angle(np.diff(hd)))))
    return length, curvature


def difficulty_score(track) -> float:
    """``track_length * cumulative_curvature`` of the ego track."""
    length, curvature = difficulty_parts(track)
    return length * curvature


# -- episode summaries -------------------------------------------------------


@dataclass
class EpisodeRecord:
    scenario_id: str
    agent_id: str
    status: str
    steps: int
    route_completion: float
    mean_speed: float
    cost: int
    total_reward: float
    average_distance: float | None = None
    final_distance: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def episode_metrics(records: Sequence[EpisodeRecord] | Iterable[dict]) -> dict:
    """Rates per terminal category and per-episode means."""
    recs = [r if isinstance(r, dict) else r.to_dict() for r in records]
    if not recs:
        raise ScenforgeError("episode_metrics on an empty batch")
    n = len(recs)
    status = [r["status"] for r in recs]
    return {
        "episodes": n,
        "success_rate": status.count(SUCCESS) / n,
        "out_of_road_rate": sum(s in (OUT_OF_ROUTE, OUT_OF_ROAD) for s in status) / n,
        "timeout_rate": status.count(TIMEOUT) / n,
        "route_completion": float(np.mean([r["route_completion"] for r in recs])),
        "mean_speed": float(np.mean([r["mean_speed"] for r in recs])),
        "cost": float(np.mean([r["cost"] for r in recs])),
        "total_reward": float(np.mean([r["total_reward"] for r in recs])),
    }
