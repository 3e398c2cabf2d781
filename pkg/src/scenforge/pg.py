"""Procedural generation of synthetic scenarios.

A map is a chain of blocks (straight, curve, intersection) sharing one
two-way road with ``lanes_per_road`` lanes in each direction. Traffic is
scattered on the road lanes at a density of ``traffic_density`` vehicles per
100 m of lane, then every vehicle is driven by IDM along its route and the
rollout is recorded as a scenario.

Intersections carry through traffic and right turns only. Each outgoing
lane is fed by exactly one lane that carries traffic, so vehicles never
meet on crossing or merging paths.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ScenforgeError
from .mapgraph import Lane, LaneLine
from .scenario import (ObjectTrack, ScenarioDescription, ScenarioMetadata, finalize_metadata,
                       normalize_angle)
from .traffic import IDMParams, equilibrium_speed

BLOCK_KINDS = ("straight", "curve", "intersection")


@dataclass
class PGConfig:
    seed: int = 0
    num_blocks: int = 2
    block_distribution: dict = field(
        default_factory=lambda: {"straight": 0.4, "curve": 0.35, "intersection": 0.25})
    traffic_density: float = 15.0
    duration_s: float = 20.0
    dt: float = 0.1
    lanes_per_road: int = 2
    construction_prob: float = 0.4
    lane_width: float = 3.5
    speed_limit: float = 13.89
    straight_length: tuple = (40.0, 120.0)
    curve_radius: tuple = (30.0, 80.0)
    curve_angle_deg: tuple = (30.0, 90.0)
    intersection_exit: tuple = (30.0, 60.0)
    arm_length: tuple = (30.0, 60.0)
    corner_radius: float = 6.0
    four_way_prob: float = 0.5
    vehicle_size: tuple = (4.5, 1.9, 1.5)

    def __post_init__(self):
        dist = {k: float(v) for k, v in dict(self.block_distribution).items()}
        unknown = set(dist) - set(BLOCK_KINDS)
        if unknown:
            raise ValueError(f"unknown block kinds {sorted(unknown)}")
        if any(v < 0 for v in dist.values()) or sum(dist.values()) <= 0:
            raise ValueError("block weights must be nonnegative with a positive sum")
        total = sum(dist.values())
        self.block_distribution = {k: dist.get(k, 0.0) / total for k in BLOCK_KINDS}
        if not self.traffic_density > 0:
            raise ValueError("traffic_density must be > 0")
        steps = self.duration_s / self.dt
        if self.dt <= 0 or abs(steps - round(steps)) > 1e-9 or round(steps) < 2:
            raise ValueError("duration_s / dt must be an integer >= 2")
        if self.num_blocks < 1 or self.lanes_per_road < 1:
            raise ValueError("num_blocks and lanes_per_road must be >= 1")
        for name in ("straight_length", "curve_radius", "curve_angle_deg", "intersection_exit",
                     "arm_length", "vehicle_size"):
            setattr(self, name, tuple(float(x) for x in getattr(self, name)))

    @property
    def n_frames(self) -> int:
        return int(round(self.duration_s / self.dt))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_mapping(cls, d: dict, **overrides) -> "PGConfig":
        names = {f.name for f in fields(cls)}
        merged = {**d, **{k: v for k, v in overrides.items() if v is not None}}
        unknown = set(merged) - names
        if unknown:
            raise ValueError(f"unknown PG config keys {sorted(unknown)}")
        return cls(**merged)

    @classmethod
    def from_file(cls, path, **overrides) -> "PGConfig":
        """Load a JSON object or ``key=value`` lines (values parsed as JSON when possible)."""
        text = Path(path).read_text(encoding="utf-8")
        try:
            data = json.loads(text)
        except json.JSONDecodeError:
            data = {}
            for line in text.splitlines():
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, _, value = line.partition("=")
                try:
                    data[key.strip()] = json.loads(value.strip())
                except json.JSONDecodeError:
                    data[key.strip()] = value.strip()
        return cls.from_mapping(data, **overrides)


# -- geometry helpers ----------------------------------------------------------


def _left(h):
    return np.stack((-np.sin(h), np.cos(h)), axis=-1)


def _offset(pts, hd, off):
    return pts + off * _left(hd)


def _straight(p0, h0, length):
    d = np.array((math.cos(h0), math.sin(h0)))
    pts = np.vstack((p0, p0 + length * d))
    return pts, np.array((h0, h0))


def _arc(p0, h0, radius, angle, turn, step=2.0):
    n = max(2, int(math.ceil(radius * angle / step)))
    phi = np.linspace(0.0, angle, n + 1)
    c = p0 + turn * radius * np.array((-math.sin(h0), math.cos(h0)))
    hd = h0 + turn * phi
    pts = c - turn * radius * _left(hd)
    pts[0] = p0
    return pts, hd


def _bezier(p0, h0, p1, h1, n=24):
    delta = abs(float(normalize_angle(h1 - h0)))
    chord = float(np.hypot(*(p1 - p0)))
    if delta < 1e-9:
        return np.vstack((p0, p1)), np.array((h0, h0))
    r = chord / (2.0 * math.sin(delta / 2.0))
    k = 4.0 / 3.0 * math.tan(delta / 4.0) * r
    c0 = p0
    c1 = p0 + k * np.array((math.cos(h0), math.sin(h0)))
    c2 = p1 - k * np.array((math.cos(h1), math.sin(h1)))
    c3 = p1
    t = np.linspace(0.0, 1.0, n + 1)[:, None]
    pts = (1 - t) ** 3 * c0 + 3 * (1 - t) ** 2 * t * c1 + 3 * (1 - t) * t ** 2 * c2 + t ** 3 * c3
    der = 3 * (1 - t) ** 2 * (c1 - c0) + 6 * (1 - t) * t * (c2 - c1) + 3 * t ** 2 * (c3 - c2)
    hd = np.arctan2(der[:, 1], der[:, 0])
    pts[0], pts[-1] = p0, p1
    return pts, hd


def _lane_polygon(center, hd, width):
    left = _offset(center, hd, 0.5 * width)
    right = _offset(center, hd, -0.5 * width)
    ring = np.vstack((left, right[::-1], left[:1]))
    return ring


def _z(pts):
    return np.hstack((pts, np.zeros((pts.shape[0], 1))))


# -- map construction ----------------------------------------------------------


@dataclass
class PGMap:
    """Generated map plus the bookkeeping traffic placement needs."""

    features: dict
    blocks: list[str]
    spawnable: list[str]
    junction: set[str] = field(default_factory=set)


class _Builder:
    def __init__(self, cfg: PGConfig):
        self.cfg = cfg
        self.w = cfg.lane_width
        self.n = cfg.lanes_per_road
        self.lanes: dict[str, Lane] = {}
        self.lines: dict[str, LaneLine] = {}
        self.spawnable: list[str] = []
        self.junction: set[str] = set()

    def lane(self, lid, center, hd, spawn=False, junction=False):
        self.lanes[lid] = Lane(lid, _z(center), _lane_polygon(center, hd, self.w), self.cfg.speed_limit)
        if spawn:
            self.spawnable.append(lid)
        if junction:
            self.junction.add(lid)
        self._headings[lid] = hd
        return lid

    def road(self, prefix, ref, hd, spawn_forward=True, spawn_backward=True):
        """Lanes and lines of a two-way road along a reference polyline.

        Returns (forward ids, backward ids), index 0 innermost.
        """
        n, w = self.n, self.w
        fwd, bwd = [], []
        for i in range(n):
            c = _offset(ref, hd, -(i + 0.5) * w)
            fwd.append(self.lane(f"{prefix}_f{i}", c, hd, spawn=spawn_forward))
            cb = _offset(ref, hd, (i + 0.5) * w)[::-1]
            bwd.append(self.lane(f"{prefix}_b{i}", cb, (hd + math.pi)[::-1], spawn=spawn_backward))
        for group in (fwd, bwd):
            for i, lid in enumerate(group):
                if i > 0:
                    self.lanes[lid].left_neighbors.append(group[i - 1])
                if i + 1 < n:
                    self.lanes[lid].right_neighbors.append(group[i + 1])
        self.lines[f"{prefix}_center"] = LaneLine(f"{prefix}_center", _z(ref), "solid")
        for side in (-1, 1):
            tag = "r" if side < 0 else "l"
            for i in range(1, n):
                self.lines[f"{prefix}_{tag}{i}"] = LaneLine(
                    f"{prefix}_{tag}{i}", _z(_offset(ref, hd, side * i * w)), "broken")
            self.lines[f"{prefix}_{tag}edge"] = LaneLine(
                f"{prefix}_{tag}edge", _z(_offset(ref, hd, side * n * w)), "road_edge")
        return fwd, bwd

    def link(self, a, b):
        if b not in self.lanes[a].exit_lanes:
            self.lanes[a].exit_lanes.append(b)
        if a not in self.lanes[b].entry_lanes:
            self.lanes[b].entry_lanes.append(a)

    def connector(self, lid, p0, h0, p1, h1):
        pts, hd = _bezier(p0, h0, p1, h1)
        return self.lane(lid, pts, hd, junction=True)


def _sample(rng, lo_hi):
    lo, hi = lo_hi
    return float(lo if hi <= lo else rng.uniform(lo, hi))


def _block(b: _Builder, k: int, kind: str, pose, rng):
    """Build one block at socket ``pose``; returns (ports, end pose, reference points)."""
    cfg, n, w = b.cfg, b.n, b.w
    p0, h0 = pose
    if kind == "straight":
        ref, hd = _straight(p0, h0, _sample(rng, cfg.straight_length))
        f, bw = b.road(f"{k}S_main", ref, hd)
        ports = ([[x] for x in f], f, [[x] for x in bw], [[x] for x in bw])
        return ports, (ref[-1], hd[-1]), ref
    if kind == "curve":
        radius = _sample(rng, cfg.curve_radius)
        angle = math.radians(_sample(rng, cfg.curve_angle_deg))
        turn = 1.0 if rng.random() < 0.5 else -1.0
        ref, hd = _arc(p0, h0, radius, angle, turn)
        f, bw = b.road(f"{k}C_main", ref, hd)
        ports = ([[x] for x in f], f, [[x] for x in bw], [[x] for x in bw])
        return ports, (ref[-1], hd[-1]), ref
    # intersection: junction box, exit road, and side arms
    road_w = 2 * n * w
    corner = cfg.corner_radius
    depth = road_w + 2 * corner
    fwd_dir = np.array((math.cos(h0), math.sin(h0)))
    left_dir = np.array((-math.sin(h0), math.cos(h0)))
    box_end = p0 + depth * fwd_dir
    four_way = rng.random() < cfg.four_way_prob
    sides = ["R", "L"] if four_way else (["R"] if rng.random() < 0.5 else ["L"])
    exit_len = _sample(rng, cfg.intersection_exit)
    arm_len = {s: _sample(rng, cfg.arm_length) for s in sides}
    pre = f"{k}X"
    thru_f, thru_b = [], []
    for i in range(n):
        off = (i + 0.5) * w
        a = p0 - off * left_dir
        thru_f.append(b.connector(f"{pre}_jct_f{i}", a, h0, a + depth * fwd_dir, h0))
        c = box_end + off * left_dir
        thru_b.append(b.connector(f"{pre}_jct_b{i}", c, h0 + math.pi, c - depth * fwd_dir, h0 + math.pi))
    for group in (thru_f, thru_b):
        for i, lid in enumerate(group):
            if i > 0:
                b.lanes[lid].left_neighbors.append(group[i - 1])
            if i + 1 < n:
                b.lanes[lid].right_neighbors.append(group[i + 1])
    ref, hd = _straight(box_end, h0, exit_len)
    ex_f, ex_b = b.road(f"{pre}_exit", ref, hd)
    for i in range(n):
        b.link(thru_f[i], ex_f[i])
        b.link(ex_b[i], thru_b[i])
    outer = (n - 0.5) * w
    in_f = [[x] for x in thru_f]
    out_b = [[x] for x in thru_b]
    refs = [ref]
    arm_lanes = {}
    for s in sides:
        sign = -1.0 if s == "R" else 1.0
        ah = h0 + sign * math.pi / 2.0
        start = p0 + 0.5 * depth * fwd_dir + sign * (0.5 * road_w + corner) * left_dir
        aref, ahd = _straight(start, ah, arm_len[s])
        af, ab = b.road(f"{pre}_arm{s}", aref, ahd, spawn_forward=True, spawn_backward=False)
        arm_lanes[s] = (af, ab, ah, start)
        refs.append(aref)
        arm_left = np.array((-math.sin(ah), math.cos(ah)))
        if s == "R":
            # forward traffic turns right into the right arm
            src = p0 - outer * left_dir
            dst = start - outer * arm_left
            rt = b.connector(f"{pre}_rt_f", src, h0, dst, ah)
            in_f[n - 1].append(rt)
            b.link(rt, af[n - 1])
            # traffic leaving the right arm turns right onto the exit road
            src = start + outer * arm_left
            dst = box_end - outer * left_dir
            rt_in = b.connector(f"{pre}_rt_armR", src, ah + math.pi, dst, h0)
            b.link(ab[n - 1], rt_in)
            b.link(rt_in, ex_f[n - 1])
        else:
            # backward traffic turns right into the left arm
            src = box_end + outer * left_dir
            dst = start - outer * arm_left
            rt = b.connector(f"{pre}_rt_b", src, h0 + math.pi, dst, ah)
            b.link(ex_b[n - 1], rt)
            b.link(rt, af[n - 1])
            src = start + outer * arm_left
            dst = p0 + outer * left_dir
            rt_in = b.connector(f"{pre}_rt_armL", src, ah + math.pi, dst, h0 + math.pi)
            b.link(ab[n - 1], rt_in)
            out_b[n - 1].append(rt_in)
    if four_way:
        # straight across between the arms (never used by generated traffic)
        fR, bR, ahR, startR = arm_lanes["R"]
        fL, bL, ahL, startL = arm_lanes["L"]
        for i in range(n):
            off = (i + 0.5) * w
            lR = np.array((-math.sin(ahR), math.cos(ahR)))
            lL = np.array((-math.sin(ahL), math.cos(ahL)))
            a = startR + off * lR
            c = startL - off * lL
            cid = b.connector(f"{pre}_cross_R{i}", a, ahR + math.pi, c, ahL)
            b.link(bR[i], cid)
            b.link(cid, fL[i])
            a = startL + off * lL
            c = startR - off * lR
            cid = b.connector(f"{pre}_cross_L{i}", a, ahL + math.pi, c, ahR)
            b.link(bL[i], cid)
            b.link(cid, fR[i])
    ports = (in_f, ex_f, [[x] for x in ex_b], out_b)
    return ports, (ref[-1], hd[-1]), np.vstack(refs)


def generate_map(cfg: PGConfig, rng: np.random.Generator | None = None) -> PGMap:
    """Sample ``cfg.num_blocks`` blocks and chain them into one map (deterministic in seed)."""
    rng = rng or np.random.default_rng(cfg.seed)
    b = _Builder(cfg)
    b._headings = {}
    kinds = list(cfg.block_distribution)
    probs = [cfg.block_distribution[k] for k in kinds]
    pose = (np.zeros(2), 0.0)
    prev_ports = None
    history: list[np.ndarray] = []
    blocks: list[str] = []
    clearance = 2 * cfg.lanes_per_road * cfg.lane_width + 2.0
    for k in range(cfg.num_blocks):
        for attempt in range(50):
            snapshot = (dict(b.lanes), dict(b.lines), list(b.spawnable), set(b.junction))
            kind = kinds[int(rng.choice(len(kinds), p=probs))]
            ports, end_pose, ref = _block(b, k, kind, pose, rng)
            older = history[:-1]
            if not older or min(_min_dist(ref, o) for o in older) > clearance:
                break
            b.lanes, b.lines, b.spawnable, b.junction = snapshot
        else:
            raise ScenforgeError("could not place a non-overlapping block")
        if prev_ports is not None:
            in_f, _, in_b, _ = ports
            _, p_out_f, p_in_b, _ = prev_ports
            for i in range(cfg.lanes_per_road):
                for dst in in_f[i]:
                    b.link(p_out_f[i], dst)
                for src in ports[3][i]:
                    for dst in p_in_b[i]:
                        b.link(src, dst)
        prev_ports = ports
        history.append(ref)
        blocks.append(kind)
        pose = (np.asarray(end_pose[0], dtype=float), float(end_pose[1]))
    features = {**b.lanes, **b.lines}
    pgmap = PGMap(features, blocks, list(b.spawnable), set(b.junction))
    pgmap.headings = b._headings
    return pgmap


def _min_dist(a: np.ndarray, c: np.ndarray) -> float:
    def dense(p):
        out = [p[:1]]
        for q0, q1 in zip(p[:-1], p[1:]):
            m = max(1, int(np.hypot(*(q1 - q0)) // 2.0))
            out.append(q0 + (q1 - q0) * (np.arange(1, m + 1)[:, None] / m))
        return np.vstack(out)

    a, c = dense(a), dense(c)
    d = a[:, None, :] - c[None, :, :]
    return float(np.sqrt((d ** 2).sum(-1)).min())


# -- traffic -------------------------------------------------------------------


@dataclass
class Spawn:
    object_id: str
    object_type: str
    lane_id: str
    s: float
    speed: float
    length: float
    width: float
    height: float
    route: list[str] = field(default_factory=list)
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0


def requested_vehicle_count(total_lane_length: float, density: float) -> int:
    """Vehicles requested for ``total_lane_length`` meters at ``density`` per 100 m."""
    return int(round(density * total_lane_length / 100.0))


def _pose_on(lane: Lane, s: float):
    xy, cs = lane.xy, lane.cum_s
    k = min(max(int(np.searchsorted(cs, s, side="right")) - 1, 0), len(cs) - 2)
    t = (s - cs[k]) / (cs[k + 1] - cs[k])
    e = xy[k + 1] - xy[k]
    p = xy[k] + t * e
    return float(p[0]), float(p[1]), math.atan2(e[1], e[0])


def _route(features: dict, start: str, rng, banned: set[str]) -> list[str]:
    route = [start]
    seen = {start}
    while True:
        nxt = [x for x in features[route[-1]].exit_lanes if x not in banned and x not in seen]
        if not nxt:
            return route
        pick = nxt[int(rng.integers(len(nxt)))] if len(nxt) > 1 else nxt[0]
        route.append(pick)
        seen.add(pick)


def route_path(features: dict, route: list[str]) -> np.ndarray:
    pts = [features[route[0]].xy]
    for lid in route[1:]:
        xy = features[lid].xy
        if np.allclose(xy[0], pts[-1][-1], atol=1e-9):
            xy = xy[1:]
        pts.append(xy)
    return np.vstack(pts)


def _unused_connectors(pgmap: PGMap) -> set[str]:
    return {lid for lid in pgmap.junction if "_rt_arm" in lid or "_cross_" in lid}


def spawn_traffic(pgmap: PGMap, cfg: PGConfig, rng: np.random.Generator | None = None,
                  idm: IDMParams | None = None) -> list[Spawn]:
    """Scatter vehicles (and maybe one construction cluster) over the spawnable lanes.

    Placement is random sequential on 1D lane intervals with at least ``s0``
    bumper gap to anything else and to both lane ends; it stops early when a
    slot cannot be found (saturation). Initial speeds are IDM equilibrium
    speeds for the gap to the leader on each vehicle's route.
    """
    rng = rng or np.random.default_rng(cfg.seed + 1)
    idm = idm or IDMParams()
    feats = pgmap.features
    lanes = [feats[l] for l in pgmap.spawnable]
    vlen, vwid, vhgt = cfg.vehicle_size
    occupied: dict[str, list[tuple[float, float]]] = {l.lane_id: [] for l in lanes}
    out: list[Spawn] = []
    if lanes and rng.random() < cfg.construction_prob:
        cands = [l for l in lanes if l.length >= 40.0 and l.lane_id not in pgmap.junction]
        if cands:
            lane = cands[int(rng.integers(len(cands)))]
            s_mid = float(rng.uniform(0.4, 0.6)) * lane.length
            items = [("barrier", "barrier0", s_mid, 0.8, 2.0, 1.0)]
            for c in range(3):
                items.append(("cone", f"cone{c}", s_mid - 2.0 * (c + 1), 0.4, 0.4, 0.7))
            for otype, oid, s, ln, wd, ht in items:
                out.append(Spawn(oid, otype, lane.lane_id, s, 0.0, ln, wd, ht))
                occupied[lane.lane_id].append((s - 0.5 * ln, s + 0.5 * ln))
    lengths = np.array([l.length for l in lanes])
    usable = lengths > vlen + 2 * idm.s0
    total = float(lengths.sum())
    want = requested_vehicle_count(total, cfg.traffic_density)
    weights = np.where(usable, lengths, 0.0)
    placed = 0
    if weights.sum() > 0:
        weights = weights / weights.sum()
        for _ in range(want):
            for _attempt in range(20):
                lane = lanes[int(rng.choice(len(lanes), p=weights))]
                lo = 0.5 * vlen + idm.s0
                hi = lane.length - 0.5 * vlen - idm.s0
                s = float(rng.uniform(lo, hi))
                a, c = s - 0.5 * vlen - idm.s0, s + 0.5 * vlen + idm.s0
                if all(c <= u0 or a >= u1 for u0, u1 in occupied[lane.lane_id]):
                    occupied[lane.lane_id].append((s - 0.5 * vlen, s + 0.5 * vlen))
                    out.append(Spawn(f"v{placed:03d}", "vehicle", lane.lane_id, s, 0.0, vlen, vwid, vhgt))
                    placed += 1
                    break
    banned = _unused_connectors(pgmap)
    for sp in out:
        sp.x, sp.y, sp.heading = _pose_on(feats[sp.lane_id], sp.s)
        if sp.object_type == "vehicle":
            sp.route = _route(feats, sp.lane_id, rng, banned)
    _equilibrium_speeds(out, feats, cfg, idm)
    return out


def _traffic_arrays(spawns: list[Spawn], feats: dict, idm: IDMParams, dt: float):
    n = len(spawns)
    veh = [i for i, s in enumerate(spawns) if s.object_type == "vehicle"]
    paths = [route_path(feats, spawns[i].route) for i in veh]
    ta = kernels.TrafficArrays(n, paths, veh, idm.vector(dt))
    for i, s in enumerate(spawns):
        ta.x[i], ta.y[i], ta.h[i] = s.x, s.y, s.heading
        ta.v[i] = s.speed
        ta.length[i], ta.width[i] = s.length, s.width
        ta.alive[i] = 1
    for k, i in enumerate(veh):
        ta.sp[k] = spawns[i].s
        ta.v0[k] = feats[spawns[i].lane_id].speed_limit
    return ta, veh


def _equilibrium_speeds(spawns: list[Spawn], feats: dict, cfg: PGConfig, idm: IDMParams) -> None:
    if not any(s.object_type == "vehicle" for s in spawns):
        return
    ta, veh = _traffic_arrays(spawns, feats, idm, cfg.dt)
    kernels.leader_scan(ta)
    for k, i in enumerate(veh):
        spawns[i].speed = equilibrium_speed(float(ta.v0[k]), float(ta.gap[k]) if ta.leader[k] >= 0 else None, idm)


def _ego_spawn(pgmap: PGMap, cfg: PGConfig, idm: IDMParams, rng) -> Spawn:
    feats = pgmap.features
    lane = next(feats[l] for l in pgmap.spawnable if l.endswith("_f0"))
    vlen, vwid, vhgt = cfg.vehicle_size
    s = 0.5 * vlen + idm.s0
    sp = Spawn("v000", "vehicle", lane.lane_id, s, float(lane.speed_limit), vlen, vwid, vhgt)
    sp.x, sp.y, sp.heading = _pose_on(lane, s)
    sp.route = _route(feats, lane.lane_id, rng, _unused_connectors(pgmap))
    return sp


# -- rollout -------------------------------------------------------------------


class _LaneChanger:
    """Static-leader lane change: re-route to a free neighbor lane with a lateral blend."""

    STATIC_SPEED = 0.1
    WAIT_S = 3.0
    BLEND_S = 2.0

    def __init__(self, feats, spawns, veh, ta, cfg, idm, rng):
        self.feats, self.spawns, self.veh, self.ta = feats, spawns, veh, ta
        self.cfg, self.idm, self.rng = cfg, idm, rng
        self.timer = np.zeros(len(veh))
        self.blend = np.zeros(len(veh))
        self.static = np.array([s.object_type != "vehicle" for s in spawns])
        self.routes = [list(spawns[i].route) for i in veh]
        self.paths = [route_path(feats, r) for r in self.routes]
        self.banned = _unused_connectors_from(feats)

    def current_lane(self, k):
        s = self.ta.sp[k]
        acc = 0.0
        for lid in self.routes[k]:
            ln = self.feats[lid].length
            if s <= acc + ln:
                return lid, s - acc
            acc += ln
        return self.routes[k][-1], s - acc + self.feats[self.routes[k][-1]].length

    def update(self, dt):
        ta = self.ta
        changed = False
        for k, i in enumerate(self.veh):
            if self.blend[k] != 0.0 and ta.alive[i]:
                step = self.blend[k] * dt
                if abs(ta.lat[k]) <= abs(step):
                    ta.lat[k] = 0.0
                    self.blend[k] = 0.0
                else:
                    ta.lat[k] -= step
            j = ta.leader[k]
            if ta.alive[i] and j >= 0 and ta.v[i] < 0.5 and ta.gap[k] < 10.0 and ta.lat[k] == 0.0 and (
                    self.static[j] or ta.v[j] < self.STATIC_SPEED):
                self.timer[k] += dt
            else:
                self.timer[k] = 0.0
            if self.timer[k] > self.WAIT_S:
                self.timer[k] = 0.0
                changed |= self.try_change(k, i)
        if changed:
            ta.set_paths(self.paths)

    def try_change(self, k, i) -> bool:
        ta, feats = self.ta, self.feats
        lid, _ = self.current_lane(k)
        lane = feats[lid]
        for target in lane.left_neighbors + lane.right_neighbors:
            tl = feats[target]
            s_t, d_t = _project(tl.xy, tl.cum_s, (ta.x[i], ta.y[i]))
            if s_t <= 0.5 * ta.length[i] or s_t >= tl.length - 0.5 * ta.length[i]:
                continue
            if not self.free(i, tl, s_t):
                continue
            route = _route(feats, target, self.rng, self.banned)
            self.routes[k] = route
            self.paths[k] = route_path(feats, route)
            ta.sp[k] = s_t
            ta.lat[k] = d_t
            self.blend[k] = d_t / self.BLEND_S
            return True
        return False

    def free(self, i, lane, s_me) -> bool:
        ta, idm = self.ta, self.idm
        back = np.array(lane.xy[0]) - 100.0 * _unit(lane.xy[1] - lane.xy[0])
        xy = np.vstack((back, lane.xy))
        cs = np.concatenate(([0.0], 100.0 + lane.cum_s))
        me = s_me + 100.0
        half = 0.5 * self.cfg.lane_width
        for j in np.flatnonzero(ta.alive):
            if j == i:
                continue
            if math.hypot(ta.x[j] - ta.x[i], ta.y[j] - ta.y[i]) > 150.0:
                continue
            s_j, d_j = _project(xy, cs, (ta.x[j], ta.y[j]))
            tang = math.atan2(*(_tangent(xy, cs, s_j)[::-1]))
            dth = ta.h[j] - tang
            lat_ext = 0.5 * ta.length[j] * abs(math.sin(dth)) + 0.5 * ta.width[j] * abs(math.cos(dth))
            lon_ext = 0.5 * ta.length[j] * abs(math.cos(dth)) + 0.5 * ta.width[j] * abs(math.sin(dth))
            if abs(d_j) - lat_ext >= half:
                continue
            gap = abs(s_j - me) - 0.5 * ta.length[i] - lon_ext
            if s_j > me:
                if gap < 10.0:
                    return False
            else:
                vj = ta.v[j]
                need = max(15.0, 2 * idm.s0 + 2 * vj * idm.T + vj * vj / (2 * idm.b))
                if gap < need:
                    return False
        return True


def _unused_connectors_from(feats) -> set[str]:
    return {lid for lid in feats if "_rt_arm" in lid or "_cross_" in lid}


def _unit(v):
    return v / np.hypot(*v)


def _project(xy, cs, p):
    s, d, _ = kernels.project_points(xy, cs, np.asarray(p, dtype=float))
    return float(s[0]), float(d[0])


def _tangent(xy, cs, s):
    k = min(max(int(np.searchsorted(cs, s, side="right")) - 1, 0), len(cs) - 2)
    return xy[k + 1] - xy[k]


def roll_out(pgmap: PGMap, spawns: list[Spawn], cfg: PGConfig, idm: IDMParams | None = None,
             rng: np.random.Generator | None = None) -> ScenarioDescription:
    """Drive every vehicle with IDM for ``duration_s`` and record the scenario.

    The vehicle with the longest recorded moving distance becomes the sdc.
    With no vehicles at all a single ego is spawned at the start of the map.
    """
    idm = idm or IDMParams()
    rng = rng or np.random.default_rng(cfg.seed + 2)
    feats = pgmap.features
    spawns = list(spawns)
    if not any(s.object_type == "vehicle" for s in spawns):
        spawns.append(_ego_spawn(pgmap, cfg, idm, rng))
    ta, veh = _traffic_arrays(spawns, feats, idm, cfg.dt)
    n, n_frames = len(spawns), cfg.n_frames
    pos = np.zeros((n, n_frames, 3))
    hd = np.zeros((n, n_frames))
    vel = np.zeros((n, n_frames, 2))
    valid = np.zeros((n, n_frames), dtype=bool)
    changer = _LaneChanger(feats, spawns, veh, ta, cfg, idm, rng)

    def record(t):
        alive = ta.alive.astype(bool)
        pos[alive, t, 0] = ta.x[alive]
        pos[alive, t, 1] = ta.y[alive]
        hd[alive, t] = ta.h[alive]
        vel[alive, t, 0] = ta.v[alive] * np.cos(ta.h[alive])
        vel[alive, t, 1] = ta.v[alive] * np.sin(ta.h[alive])
        valid[alive, t] = True

    record(0)
    for t in range(1, n_frames):
        kernels.idm_step(ta)
        changer.update(cfg.dt)
        record(t)
    tracks = {}
    for i, s in enumerate(spawns):
        meta = {"route": list(changer.routes[veh.index(i)])} if i in veh else {"lane_id": s.lane_id}
        tracks[s.object_id] = ObjectTrack(s.object_type, pos[i], normalize_angle(hd[i]), vel[i], valid[i],
                                          s.length, s.width, s.height, meta)
    dist = {oid: float(np.sum(np.hypot(*np.diff(tr.position[tr.valid][:, :2], axis=0).T)))
            for oid, tr in tracks.items() if tr.object_type == "vehicle"}
    sdc = min(dist, key=lambda oid: (-dist[oid], oid))
    md = ScenarioMetadata(source="pg", dt=cfg.dt, episode_length=n_frames, sdc_id=sdc,
                          extra={"pg_blocks": list(pgmap.blocks), "pg_seed": int(cfg.seed)})
    desc = ScenarioDescription(f"pg_{cfg.seed}", feats, tracks, {}, md)
    return finalize_metadata(desc)


def generate_scenario(cfg: PGConfig | int) -> ScenarioDescription:
    """Full pipeline: map, traffic, rollout. Deterministic in ``cfg``."""
    if not isinstance(cfg, PGConfig):
        cfg = PGConfig(seed=int(cfg))
    rng = np.random.default_rng(cfg.seed)
    pgmap = generate_map(cfg, rng)
    spawns = spawn_traffic(pgmap, cfg, rng)
    return roll_out(pgmap, spawns, cfg, rng=rng)


class PGConverter:
    """Picklable converter for ``build_database``: seed -> scenario."""

    def __init__(self, cfg: PGConfig | None = None):
        self.cfg = cfg or PGConfig()

    def __call__(self, seed) -> ScenarioDescription:
        d = self.cfg.to_dict()
        d["seed"] = int(seed)
        return generate_scenario(PGConfig.from_mapping(d))
