"""Closed-loop step loop over a scenario.

Every object gets one policy binding: ``Replay`` (logged poses),
``IDM`` (car following along its own logged path), or ``EnvInput``
(kinematic bicycle driven by external actions). Agents are the objects whose
episode is scored: the sdc in single-agent mode, every vehicle in
multi-agent mode.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels, sensing
from .errors import SimulationError
from .mapgraph import MapIndex
from .metrics import (OBJECT, OUT_OF_ROAD, OUT_OF_ROUTE, RUNNING, SUCCESS, TIMEOUT, VEHICLE_OR_HUMAN,
                      EpisodeRecord, RewardConfig, Transition, average_distance, final_distance,
                      step_reward)
from .scenario import ScenarioDescription, validate_scenario
from .traffic import IDMParams, idm_acceleration

REPLAY = "Replay"
IDM = "IDM"
ENV = "EnvInput"
BINDINGS = (REPLAY, IDM, ENV)
VEHICLE_LIKE = ("vehicle", "pedestrian", "cyclist")
EGO_POLICIES = {"env": ENV, "idm": IDM, "replay": REPLAY}

__all__ = ["SimConfig", "WorldState", "AgentState", "reset", "step", "idm_acceleration", "leader_lookup",
           "kinematic_step", "detect_collisions", "light_for_object", "check_termination", "run_episode"]


@dataclass
class SimConfig:
    mode: str = "single"
    ego_policy: str = "env"
    traffic: str = "log"
    reward: RewardConfig | None = None
    idm: IDMParams = field(default_factory=IDMParams)
    wheelbase: float = 2.8
    max_steer_deg: float = 40.0
    accel_scale: float = 2.5
    brake_scale: float = 5.0
    out_of_route: float = 2.5
    out_of_road: float = 10.0
    success_radius: float = 2.0
    success_completion: float = 0.95
    timeout_extra: int = 50
    behind_lateral: float = 3.5
    behind_extension: float = 100.0
    lidar_rays: int = 120
    lidar_range: float = 50.0
    lidar_noise: float = 0.01
    nav_points: int = 10
    nav_spacing: float = 2.0
    use_boundary: bool = False
    boundary_rays: int = 12
    speed_norm_kmh: float = 80.0
    noise_seed: int = 0
    observations: bool = True

    def __post_init__(self):
        if self.mode not in ("single", "multi"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.ego_policy not in EGO_POLICIES:
            raise ValueError(f"unknown ego policy {self.ego_policy!r}")
        if self.traffic not in ("log", "idm", "replay"):
            raise ValueError(f"unknown traffic policy {self.traffic!r}")
        if self.reward is None:
            self.reward = RewardConfig.multi() if self.mode == "multi" else RewardConfig.single()


@dataclass
class AgentState:
    agent_id: str
    index: int
    ref_xy: np.ndarray
    ref_s: np.ndarray
    first_frame: int
    controlled: bool
    spawned: bool = False
    status: str = RUNNING
    steer: float = 0.0
    accel: float = 0.0
    s: float = 0.0
    d: float = 0.0
    max_s: float = 0.0
    crashes: int = 0
    contacts: frozenset = frozenset()
    total_reward: float = 0.0
    steps: int = 0
    speed_sum: float = 0.0
    trajectory: list = field(default_factory=list)

    @property
    def ref_length(self) -> float:
        return float(self.ref_s[-1])


class WorldState:
    """Runtime state of one episode. Confined to a single thread."""

    def __init__(self, scenario: ScenarioDescription, cfg: SimConfig):
        self.scenario = scenario
        self.cfg = cfg
        self.map = MapIndex(scenario.map_features)
        self.tick = 0
        self.dt = float(scenario.metadata.dt)
        self.n_frames = int(scenario.metadata.episode_length)
        self.ids = list(scenario.tracks)
        self.index = {oid: i for i, oid in enumerate(self.ids)}
        self.types = [scenario.tracks[o].object_type for o in self.ids]
        self.vehicle_like = np.array([t in VEHICLE_LIKE for t in self.types])
        n = len(self.ids)
        tr = [scenario.tracks[o] for o in self.ids]
        nf = self.n_frames
        self.rec_x = np.array([t.position[:nf, 0] for t in tr]).reshape(n, nf)
        self.rec_y = np.array([t.position[:nf, 1] for t in tr]).reshape(n, nf)
        self.rec_h = np.array([t.heading[:nf] for t in tr]).reshape(n, nf)
        self.rec_v = np.array([np.hypot(t.velocity[:nf, 0], t.velocity[:nf, 1]) for t in tr]).reshape(n, nf)
        self.rec_valid = np.array([t.valid[:nf] for t in tr], dtype=bool).reshape(n, nf)
        self.bindings = [REPLAY] * n
        self.agents: dict[str, AgentState] = {}
        self.rng = np.random.default_rng(cfg.noise_seed)
        self.done = False
        self.ta: kernels.TrafficArrays | None = None
        self.idm_pending: dict[int, list[int]] = {}
        self.replay_idx = np.zeros(0, dtype=np.int64)
        self.prev_h: np.ndarray | None = None
        self.prev_alive: np.ndarray | None = None

    @property
    def time_s(self) -> float:
        return self.tick * self.dt

    @property
    def horizon(self) -> int:
        return self.n_frames + self.cfg.timeout_extra

    def pose(self, object_id: str) -> tuple[float, float, float]:
        i = self.index[object_id]
        return float(self.ta.x[i]), float(self.ta.y[i]), float(self.ta.h[i])

    def speed(self, object_id: str) -> float:
        return float(self.ta.v[self.index[object_id]])

    def alive(self, object_id: str) -> bool:
        return bool(self.ta.alive[self.index[object_id]])

    def yaw_rate(self, object_id: str) -> float:
        """Wrapped heading change over the last tick / dt; 0 before the first step or right after spawning."""
        i = self.index[object_id]
        if self.prev_h is None or not (self.prev_alive[i] and self.ta.alive[i]):
            return 0.0
        dh = (self.ta.h[i] - self.prev_h[i] + math.pi) % (2.0 * math.pi) - math.pi
        return float(dh / self.dt)

    def live_controlled(self) -> list[str]:
        return [a.agent_id for a in self.agents.values()
                if a.controlled and a.spawned and a.status == RUNNING]

    def snapshot(self) -> dict:
        """Plain-data view used for determinism checks and rendering."""
        ta = self.ta
        return {"tick": self.tick, "x": ta.x.tolist(), "y": ta.y.tolist(), "h": ta.h.tolist(),
                "v": ta.v.tolist(), "alive": ta.alive.tolist(), "bindings": list(self.bindings),
                "agents": {k: a.status for k, a in self.agents.items()}}

    def episode_records(self) -> list[EpisodeRecord]:
        out = []
        for a in self.agents.values():
            if not a.spawned:
                continue
            traj = np.array(a.trajectory)
            frames = np.arange(a.first_frame, min(a.first_frame + len(traj), self.n_frames))
            frames = frames[self.rec_valid[a.index, frames]] if frames.size else frames
            avg = fin = None
            if frames.size:
                gt = np.column_stack((self.rec_x[a.index, frames], self.rec_y[a.index, frames]))
                sel = traj[frames - a.first_frame]
                avg = average_distance(sel, gt)
                fin = final_distance(traj, gt[-1:])
            out.append(EpisodeRecord(
                scenario_id=self.scenario.scenario_id, agent_id=a.agent_id,
                status=a.status, steps=a.steps,
                route_completion=float(min(1.0, max(0.0, a.max_s / a.ref_length))) if a.ref_length > 0 else 0.0,
                mean_speed=a.speed_sum / a.steps if a.steps else 0.0, cost=a.crashes,
                total_reward=a.total_reward, average_distance=avg, final_distance=fin))
        return out


def _dedupe(xy: np.ndarray) -> np.ndarray:
    if xy.shape[0] == 0:
        return xy
    keep = np.ones(xy.shape[0], dtype=bool)
    keep[1:] = np.hypot(*np.diff(xy, axis=0).T) > 1e-6
    return xy[keep]


def _reference(world: WorldState, i: int) -> np.ndarray:
    valid = world.rec_valid[i]
    xy = _dedupe(np.column_stack((world.rec_x[i, valid], world.rec_y[i, valid])))
    if xy.shape[0] >= 2:
        return xy
    f = int(np.flatnonzero(valid)[0])
    h = world.rec_h[i, f]
    p = np.array((world.rec_x[i, f], world.rec_y[i, f]))
    return np.vstack((p, p + np.array((math.cos(h), math.sin(h)))))


def _behind_ego(world: WorldState, ego: int) -> list[int]:
    cfg = world.cfg
    ref = _reference(world, ego)
    e = ref[1] - ref[0]
    back = ref[0] - cfg.behind_extension * e / math.hypot(*e)
    ext = np.vstack((back, ref))
    s_ref = kernels.arc_length(ext)
    f0 = int(np.flatnonzero(world.rec_valid[ego])[0])
    s_e, _, _ = kernels.project_points(ext, s_ref, np.array([[world.rec_x[ego, f0], world.rec_y[ego, f0]]]))
    cand = [i for i in range(len(world.ids))
            if i != ego and world.types[i] == "vehicle" and world.rec_valid[i, 0]]
    if not cand:
        return []
    pts = np.column_stack((world.rec_x[cand, 0], world.rec_y[cand, 0]))
    s, d, _ = kernels.project_points(ext, s_ref, pts)
    return [i for i, si, di in zip(cand, s, d) if si < s_e[0] and abs(di) < cfg.behind_lateral]


def _assign_bindings(world: WorldState) -> None:
    cfg, sc = world.cfg, world.scenario
    ego = world.index[sc.metadata.sdc_id]
    if cfg.mode == "multi":
        for i, t in enumerate(world.types):
            if t == "vehicle" and world.rec_valid[i].any():
                world.bindings[i] = ENV
        return
    world.bindings[ego] = EGO_POLICIES[cfg.ego_policy]
    if cfg.traffic == "idm":
        idm = [i for i, t in enumerate(world.types) if t == "vehicle" and i != ego]
    elif cfg.traffic == "log":
        idm = _behind_ego(world, ego)
    else:
        idm = []
    for i in idm:
        world.bindings[i] = IDM


def _v0(world: WorldState, i: int, path: np.ndarray) -> float:
    lane = world.map.lane(world.map.nearest_lane(path[0])) if world.map.lanes else None
    if lane is not None and lane.speed_limit is not None and lane.speed_limit > 0:
        return float(lane.speed_limit)
    return float(world.rec_v[i][world.rec_valid[i]].max())


def reset(scenario: ScenarioDescription, mode: str | None = None, cfg: SimConfig | None = None,
          validate: bool = True) -> tuple[WorldState, dict]:
    """Instantiate a world at frame 0 and bind policies; returns (world, observations)."""
    if cfg is None:
        cfg = SimConfig(mode=mode or "single")
    elif mode is not None and mode != cfg.mode:
        raise SimulationError(f"mode {mode!r} conflicts with config mode {cfg.mode!r}")
    if validate:
        report = validate_scenario(scenario)
        if not report.ok:
            raise SimulationError("scenario failed validation: " + "; ".join(report.violations[:5]))
    w = WorldState(scenario, cfg)
    _assign_bindings(w)
    n = len(w.ids)
    idm_idx = [i for i in range(n) if w.bindings[i] == IDM]
    paths = [_reference(w, i) for i in idm_idx]
    ta = kernels.TrafficArrays(n, paths, idm_idx, cfg.idm.vector(w.dt))
    w.ta = ta
    for i, oid in enumerate(w.ids):
        tr = scenario.tracks[oid]
        ta.length[i], ta.width[i] = tr.length, tr.width
    for k, i in enumerate(idm_idx):
        ta.v0[k] = _v0(w, i, paths[k])
        f = int(np.flatnonzero(w.rec_valid[i])[0])
        w.idm_pending.setdefault(f, []).append(k)
    w.replay_idx = np.array([i for i in range(n) if w.bindings[i] == REPLAY], dtype=np.int64)
    ego = w.index[scenario.metadata.sdc_id]
    if cfg.mode == "multi":
        agent_idx = [i for i in range(n) if w.bindings[i] == ENV]
    else:
        agent_idx = [ego]
    for i in agent_idx:
        ref = _reference(w, i)
        w.agents[w.ids[i]] = AgentState(
            w.ids[i], i, ref, kernels.arc_length(ref), int(np.flatnonzero(w.rec_valid[i])[0]),
            controlled=w.bindings[i] == ENV)
    _sync_replay(w, 0)
    _spawn_idm(w, 0)
    for a in w.agents.values():
        if a.first_frame == 0 or cfg.mode == "single":
            _spawn_agent(w, a)
    obs = _observations(w)
    return w, obs


def _sync_replay(w: WorldState, t: int) -> None:
    ta, rep = w.ta, w.replay_idx
    if rep.size == 0:
        return
    if t >= w.n_frames:
        ta.alive[rep] = 0
        return
    valid = w.rec_valid[rep, t]
    on = rep[valid]
    ta.x[on] = w.rec_x[on, t]
    ta.y[on] = w.rec_y[on, t]
    ta.h[on] = w.rec_h[on, t]
    ta.v[on] = w.rec_v[on, t]
    ta.alive[rep] = valid


def _spawn_idm(w: WorldState, t: int) -> None:
    ta = w.ta
    for k in w.idm_pending.pop(t, ()):
        i = int(ta.idm[k])
        ta.x[i], ta.y[i], ta.h[i] = w.rec_x[i, t], w.rec_y[i, t], w.rec_h[i, t]
        ta.v[i] = w.rec_v[i, t]
        ta.sp[k] = 0.0
        ta.alive[i] = 1


def _spawn_agent(w: WorldState, a: AgentState) -> None:
    ta, i, f = w.ta, a.index, a.first_frame
    if w.bindings[i] != IDM:
        ta.x[i], ta.y[i], ta.h[i] = w.rec_x[i, f], w.rec_y[i, f], w.rec_h[i, f]
        ta.v[i] = w.rec_v[i, f]
        ta.alive[i] = 1
    a.spawned = True
    s, d, _ = kernels.project_points(a.ref_xy, a.ref_s, np.array([[ta.x[i], ta.y[i]]]))
    a.s, a.d = float(s[0]), float(d[0])
    a.max_s = a.s
    a.trajectory.append((float(ta.x[i]), float(ta.y[i])))


def _observations(w: WorldState) -> dict:
    if not w.cfg.observations:
        return {}
    return {aid: sensing.observe(w, aid) for aid in w.live_controlled()}


def kinematic_step(state, action, dt: float, cfg: SimConfig | None = None):
    """Kinematic bicycle, explicit Euler. ``state`` is (x, y, heading, speed)."""
    cfg = cfg or SimConfig()
    x, y, h, v = state
    steer = min(1.0, max(-1.0, float(action[0])))
    acc = min(1.0, max(-1.0, float(action[1])))
    delta = steer * math.radians(cfg.max_steer_deg)
    a = acc * (cfg.accel_scale if acc >= 0.0 else cfg.brake_scale)
    nx = x + v * math.cos(h) * dt
    ny = y + v * math.sin(h) * dt
    nh = h + v * math.tan(delta) / cfg.wheelbase * dt
    nh = (nh + math.pi) % (2.0 * math.pi) - math.pi
    nv = max(0.0, v + a * dt)
    return nx, ny, nh, nv


def _normalize_actions(w: WorldState, actions) -> dict:
    live = w.live_controlled()
    if actions is None:
        actions = {}
    elif not isinstance(actions, dict):
        if len(live) != 1:
            raise SimulationError("a bare action needs exactly one live agent")
        actions = {live[0]: actions}
    out = {}
    for aid, act in actions.items():
        if aid not in w.agents or not w.agents[aid].controlled:
            raise SimulationError(f"action for unknown agent '{aid}'")
        if aid not in live:
            raise SimulationError(f"action for inactive agent '{aid}'")
        a = np.asarray(act, dtype=np.float64).reshape(-1)
        if a.shape[0] != 2 or not np.all(np.isfinite(a)):
            raise SimulationError(f"action for '{aid}' must be two finite numbers")
        out[aid] = (min(1.0, max(-1.0, a[0])), min(1.0, max(-1.0, a[1])))
    missing = [aid for aid in live if aid not in out]
    if missing:
        raise SimulationError(f"missing action for {missing}")
    return out


def _collision_class(w: WorldState, other: int) -> str:
    return VEHICLE_OR_HUMAN if w.vehicle_like[other] else OBJECT


def detect_collisions(world: WorldState) -> list[tuple[str, str, str]]:
    """Overlapping live footprints as (id_a, id_b, class), ids ordered by index."""
    ta = world.ta
    pairs = kernels.collision_pairs(ta.x, ta.y, ta.h, ta.length, ta.width, ta.alive)
    out = []
    for a, b in pairs:
        cls = VEHICLE_OR_HUMAN if world.vehicle_like[a] and world.vehicle_like[b] else OBJECT
        out.append((world.ids[a], world.ids[b], cls))
    return out


def check_termination(world: WorldState, agent_id: str) -> str:
    """Termination status from the agent's current Frenet state; terminal states absorb."""
    a, cfg = world.agents[agent_id], world.cfg
    if a.status != RUNNING:
        return a.status
    if cfg.mode == "multi":
        if abs(a.d) > cfg.out_of_road:
            return OUT_OF_ROAD
        if a.max_s / a.ref_length > cfg.success_completion:
            return SUCCESS
    else:
        if abs(a.d) > cfg.out_of_route:
            return OUT_OF_ROUTE
        if a.s >= a.ref_length - cfg.success_radius:
            return SUCCESS
    if a.controlled or world.bindings[a.index] == IDM:
        if world.tick >= world.horizon:
            return TIMEOUT
    return RUNNING


def step(world: WorldState, actions=None) -> tuple[dict, dict, dict, dict]:
    """Advance one tick; returns (observations, rewards, terminations, info)."""
    if world.done:
        raise SimulationError("episode is over; call reset")
    acts = _normalize_actions(world, actions)
    w, ta, cfg = world, world.ta, world.cfg
    w.prev_h = ta.h.copy()
    w.prev_alive = ta.alive.copy()
    t1 = w.tick + 1
    _sync_replay(w, t1)
    _spawn_idm(w, t1)
    if ta.idm.shape[0]:
        kernels.idm_step(ta)
    for aid, (steer, acc) in acts.items():
        a = w.agents[aid]
        i = a.index
        ta.x[i], ta.y[i], ta.h[i], ta.v[i] = kinematic_step(
            (float(ta.x[i]), float(ta.y[i]), float(ta.h[i]), float(ta.v[i])), (steer, acc), w.dt, cfg)
        a.steer, a.accel = steer, acc
    for a in w.agents.values():
        if not a.spawned and a.first_frame == t1:
            _spawn_agent(w, a)
            a.trajectory.pop()
    w.tick = t1
    partners: dict[int, set[int]] = {}
    if w.agents:
        for p, q in kernels.collision_pairs(ta.x, ta.y, ta.h, ta.length, ta.width, ta.alive):
            partners.setdefault(int(p), set()).add(int(q))
            partners.setdefault(int(q), set()).add(int(p))
    rewards, terms, info = {}, {}, {}
    for a in w.agents.values():
        if not a.spawned or a.status != RUNNING:
            continue
        i = a.index
        s, d, _ = kernels.project_points(a.ref_xy, a.ref_s, np.array([[ta.x[i], ta.y[i]]]))
        disp = float(s[0]) - a.s
        a.s, a.d = float(s[0]), float(d[0])
        a.max_s = max(a.max_s, a.s)
        hit = partners.get(i, set())
        collision = None
        if hit:
            collision = VEHICLE_OR_HUMAN if any(w.vehicle_like[j] for j in hit) else OBJECT
        a.crashes += len(hit - a.contacts)
        a.contacts = frozenset(hit)
        status = check_termination(w, a.agent_id)
        a.status = status
        r = step_reward(cfg.reward, Transition(disp, float(ta.v[i]), a.steer, collision,
                                               None if status == RUNNING else status))
        a.total_reward += r
        a.steps += 1
        a.speed_sum += float(ta.v[i])
        a.trajectory.append((float(ta.x[i]), float(ta.y[i])))
        rewards[a.agent_id] = r
        terms[a.agent_id] = status
        info[a.agent_id] = {"status": status, "collision": collision, "cost": a.crashes,
                            "route_completion": min(1.0, a.max_s / a.ref_length), "s": a.s, "d": a.d}
        if status != RUNNING and cfg.mode == "multi":
            ta.alive[i] = 0
    w.done = _world_done(w)
    info["__world__"] = {"tick": w.tick, "done": w.done}
    return _observations(w), rewards, terms, info


def _world_done(w: WorldState) -> bool:
    controlled = [a for a in w.agents.values() if a.controlled]
    if controlled:
        return all(a.spawned and a.status != RUNNING for a in controlled)
    tracked = list(w.agents.values())
    if any(w.bindings[a.index] == IDM for a in tracked):
        return all(a.status != RUNNING for a in tracked) or w.tick >= w.horizon
    return w.tick >= w.n_frames - 1


def leader_lookup(world: WorldState, object_id: str):
    """(leader_id, gap, closing_speed) ahead on the object's path, or None."""
    i = world.index[object_id]
    ta = world.ta
    k_idm = np.flatnonzero(ta.idm == i)
    if k_idm.size:
        k = int(k_idm[0])
        path = np.column_stack((ta.px[ta.p0[k]:ta.p1[k]], ta.py[ta.p0[k]:ta.p1[k]]))
        sp, lat = float(ta.sp[k]), float(ta.lat[k])
    else:
        path = _reference(world, i)
        s, _, _ = kernels.project_points(path, kernels.arc_length(path), np.array([[ta.x[i], ta.y[i]]]))
        sp, lat = float(s[0]), 0.0
    tmp = kernels.TrafficArrays(0, [path], [i], ta.params)
    for name in ("x", "y", "h", "v", "length", "width", "alive"):
        setattr(tmp, name, getattr(ta, name))
    tmp.sp[0], tmp.lat[0] = sp, lat
    kernels.leader_scan(tmp)
    if tmp.leader[0] < 0:
        return None
    return world.ids[int(tmp.leader[0])], float(tmp.gap[0]), float(tmp.dv[0])


def light_for_object(world: WorldState, object_id: str):
    """Light state on the object's lane (or an immediate successor) at the current tick."""
    lights = world.scenario.dynamic_states
    if not lights or not world.map.lanes:
        return None
    by_lane = {}
    for lid in sorted(lights):
        by_lane.setdefault(lights[lid].lane_id, lights[lid])
    x, y, _ = world.pose(object_id)
    lane_id = world.map.nearest_lane((x, y))
    for cand in [lane_id] + sorted(world.map.lane(lane_id).exit_lanes):
        if cand in by_lane:
            states = by_lane[cand].states
            return states[world.tick] if world.tick < len(states) else "Unknown"
    return None


def run_episode(scenario: ScenarioDescription, cfg: SimConfig | None = None, policy=None,
                max_steps: int | None = None) -> WorldState:
    """Step until done. ``policy(world, observations) -> actions`` drives EnvInput agents."""
    world, obs = reset(scenario, cfg=cfg or SimConfig())
    limit = max_steps if max_steps is not None else world.horizon + 2
    while not world.done and world.tick < limit:
        live = world.live_controlled()
        if live and policy is None:
            raise SimulationError("EnvInput agents need a policy")
        acts = policy(world, obs) if live else None
        obs, _, _, _ = step(world, acts)
    return world
