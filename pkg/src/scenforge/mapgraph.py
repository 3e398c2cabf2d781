"""Lane geometry: Frenet projection, containment, connectivity and a grid index."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import kernels
from .errors import MapError

LINE_TYPES = ("broken", "solid", "road_edge")
BOUNDARY_TYPES = ("solid", "road_edge")
DEFAULT_CELL = 16.0


@dataclass(eq=False)
class Lane:
    lane_id: str
    polyline: np.ndarray
    polygon: np.ndarray
    speed_limit: float | None = None
    entry_lanes: list[str] = field(default_factory=list)
    exit_lanes: list[str] = field(default_factory=list)
    left_neighbors: list[str] = field(default_factory=list)
    right_neighbors: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.polyline = np.asarray(self.polyline, dtype=np.float64)
        self.polygon = np.asarray(self.polygon, dtype=np.float64)

    @cached_property
    def xy(self) -> np.ndarray:
        return np.ascontiguousarray(self.polyline[:, :2])

    @cached_property
    def cum_s(self) -> np.ndarray:
        return kernels.arc_length(self.xy)

    @property
    def length(self) -> float:
        return float(self.cum_s[-1])


@dataclass(eq=False)
class LaneLine:
    line_id: str
    polyline: np.ndarray
    line_type: str = "broken"

    def __post_init__(self):
        self.polyline = np.asarray(self.polyline, dtype=np.float64)

    @cached_property
    def segments(self) -> np.ndarray:
        xy = self.polyline[:, :2]
        return np.ascontiguousarray(np.hstack((xy[:-1], xy[1:])))


def _as_xy_and_s(path) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(path, Lane):
        return path.xy, path.cum_s
    if isinstance(path, Polyline):
        return path.xy, path.cum_s
    xy = np.ascontiguousarray(np.asarray(path, dtype=np.float64)[:, :2])
    return xy, kernels.arc_length(xy)


class Polyline:
    """A 2D polyline with cached arc lengths; used for reference trajectories."""

    def __init__(self, points):
        xy = np.asarray(points, dtype=np.float64)[:, :2]
        if xy.shape[0] >= 2:
            keep = np.concatenate(([True], np.hypot(*np.diff(xy, axis=0).T) > 0.0))
            xy = xy[keep]
        if xy.shape[0] < 2:
            raise MapError("polyline needs at least two distinct points")
        self.xy = np.ascontiguousarray(xy)
        self.cum_s = kernels.arc_length(self.xy)

    @property
    def length(self) -> float:
        return float(self.cum_s[-1])

    def project(self, point) -> tuple[float, float]:
        s, d, _ = kernels.project_points(self.xy, self.cum_s, np.asarray(point, dtype=float)[:2])
        return float(s[0]), float(d[0])

    def project_many(self, points) -> tuple[np.ndarray, np.ndarray]:
        s, d, _ = kernels.project_points(self.xy, self.cum_s, np.asarray(points, dtype=float)[:, :2])
        return s, d

    def point_at(self, s: float, d: float = 0.0) -> np.ndarray:
        return frenet_to_cartesian(self, s, d)

    def tangent_at(self, s: float) -> float:
        k = _segment_at(self.cum_s, s)
        e = self.xy[k + 1] - self.xy[k]
        return math.atan2(e[1], e[0])


def frenet_project(path, point) -> tuple[float, float]:
    """Return ``(s, d)`` of ``point`` relative to a lane centerline or polyline.

    ``s`` is clamped to ``[0, length]``; ``d`` is positive to the left of the
    direction of travel. Points past either end keep their perpendicular
    offset from the end segment.
    """
    xy, cum_s = _as_xy_and_s(path)
    s, d, _ = kernels.project_points(xy, cum_s, np.asarray(point, dtype=float)[:2])
    return float(s[0]), float(d[0])


def _segment_at(cum_s: np.ndarray, s: float) -> int:
    k = int(np.searchsorted(cum_s, s, side="right")) - 1
    return min(max(k, 0), len(cum_s) - 2)


def frenet_to_cartesian(path, s: float, d: float = 0.0) -> np.ndarray:
    """Walk ``s`` along the centerline and offset ``d`` along the left normal."""
    xy, cum_s = _as_xy_and_s(path)
    k = _segment_at(cum_s, s)
    seg = cum_s[k + 1] - cum_s[k]
    e = xy[k + 1] - xy[k]
    t = (s - cum_s[k]) / seg
    n = np.array((-e[1], e[0])) / seg
    return xy[k] + t * e + d * n


def point_on_lane(lane: Lane, point) -> bool:
    """Even-odd test against the lane polygon; boundary points are inside."""
    return bool(kernels.points_in_polygon(lane.polygon[:, :2], np.asarray(point, dtype=float)[:2])[0])


def _segments_intersect(p1, p2, q1, q2) -> np.ndarray:
    """Vectorized closed-segment intersection (touching and collinear overlap count)."""

    def orient(a, b, c):
        return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])

    def on_seg(a, b, c):
        return ((np.minimum(a[..., 0], b[..., 0]) <= c[..., 0]) & (c[..., 0] <= np.maximum(a[..., 0], b[..., 0]))
                & (np.minimum(a[..., 1], b[..., 1]) <= c[..., 1]) & (c[..., 1] <= np.maximum(a[..., 1], b[..., 1])))

    o1 = orient(p1, p2, q1)
    o2 = orient(p1, p2, q2)
    o3 = orient(q1, q2, p1)
    o4 = orient(q1, q2, p2)
    general = (np.sign(o1) * np.sign(o2) < 0) & (np.sign(o3) * np.sign(o4) < 0)
    special = ((o1 == 0) & on_seg(p1, p2, q1)) | ((o2 == 0) & on_seg(p1, p2, q2)) \
        | ((o3 == 0) & on_seg(q1, q2, p1)) | ((o4 == 0) & on_seg(q1, q2, p2))
    return general | special


def polygon_is_simple(ring) -> bool:
    """True when a closed ring has no self-intersections between non-adjacent edges."""
    ring = np.asarray(ring, dtype=np.float64)[:, :2]
    if not np.array_equal(ring[0], ring[-1]):
        ring = np.vstack((ring, ring[:1]))
    m = ring.shape[0] - 1
    if m < 3:
        return False
    a = ring[:-1]
    b = ring[1:]
    i, j = np.triu_indices(m, 2)
    keep = ~((i == 0) & (j == m - 1))
    i, j = i[keep], j[keep]
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    boxes = np.all(lo[i] <= hi[j], axis=1) & np.all(lo[j] <= hi[i], axis=1)
    i, j = i[boxes], j[boxes]
    if i.size == 0:
        return True
    return not bool(_segments_intersect(a[i], b[i], a[j], b[j]).any())


def crosses_line(segment, line: LaneLine) -> bool:
    """True iff the motion segment properly crosses some segment of ``line``."""
    (x0, y0), (x1, y1) = segment
    segs = line.segments
    p1 = np.array((x0, y0), dtype=float)
    p2 = np.array((x1, y1), dtype=float)
    q1 = segs[:, :2]
    q2 = segs[:, 2:]
    d1 = (p2[0] - p1[0]) * (q1[:, 1] - p1[1]) - (p2[1] - p1[1]) * (q1[:, 0] - p1[0])
    d2 = (p2[0] - p1[0]) * (q2[:, 1] - p1[1]) - (p2[1] - p1[1]) * (q2[:, 0] - p1[0])
    d3 = (q2[:, 0] - q1[:, 0]) * (p1[1] - q1[:, 1]) - (q2[:, 1] - q1[:, 1]) * (p1[0] - q1[:, 0])
    d4 = (q2[:, 0] - q1[:, 0]) * (p2[1] - q1[:, 1]) - (q2[:, 1] - q1[:, 1]) * (p2[0] - q1[:, 0])
    return bool(np.any((d1 * d2 < 0) & (d3 * d4 < 0)))


def validate_lane(lane: Lane, known_ids=None) -> list[str]:
    """Violations of the lane invariants (empty when valid)."""
    out = []
    where = f"map_features/{lane.lane_id}"
    pl = lane.polyline
    if pl.ndim != 2 or pl.shape[0] < 2 or pl.shape[1] not in (2, 3):
        out.append(f"{where}: polyline needs >= 2 points of (x, y, z)")
    elif np.any(np.hypot(*np.diff(pl[:, :2], axis=0).T) == 0.0):
        out.append(f"{where}: polyline has zero-length spacing")
    if not np.all(np.isfinite(pl)):
        out.append(f"{where}: polyline has non-finite values")
    pg = lane.polygon
    if pg.ndim != 2 or pg.shape[0] < 4 or pg.shape[1] < 2:
        out.append(f"{where}: polygon needs a closed ring of >= 3 vertices")
    elif not np.array_equal(pg[0, :2], pg[-1, :2]):
        out.append(f"{where}: polygon ring not closed")
    elif not polygon_is_simple(pg):
        out.append(f"{where}: polygon ring self-intersects")
    if lane.speed_limit is not None and not lane.speed_limit > 0:
        out.append(f"{where}: speed_limit must be positive")
    if known_ids is not None:
        for attr in ("entry_lanes", "exit_lanes", "left_neighbors", "right_neighbors"):
            for ref in getattr(lane, attr):
                if ref not in known_ids:
                    out.append(f"{where}: dangling lane reference '{ref}' in {attr}")
    return out


def validate_map(features: dict) -> list[str]:
    lane_ids = {k for k, f in features.items() if isinstance(f, Lane)}
    out = []
    for fid, feat in features.items():
        if isinstance(feat, Lane):
            if feat.lane_id != fid:
                out.append(f"map_features/{fid}: id mismatch '{feat.lane_id}'")
            out.extend(validate_lane(feat, lane_ids))
        elif isinstance(feat, LaneLine):
            if feat.polyline.ndim != 2 or feat.polyline.shape[0] < 2:
                out.append(f"map_features/{fid}: lane line needs >= 2 points")
            if feat.line_type not in LINE_TYPES:
                out.append(f"map_features/{fid}: unknown line_type '{feat.line_type}'")
        else:
            out.append(f"map_features/{fid}: unknown feature kind")
    return out


class MapIndex:
    """Uniform grid over lane polygons plus id lookup. Immutable after build."""

    def __init__(self, features: dict, cell: float = DEFAULT_CELL):
        self.cell = float(cell)
        self.lanes: dict[str, Lane] = {k: f for k, f in features.items() if isinstance(f, Lane)}
        self.lines: dict[str, LaneLine] = {k: f for k, f in features.items() if isinstance(f, LaneLine)}
        self.grid: dict[tuple[int, int], list[str]] = {}
        for lid in sorted(self.lanes):
            lane = self.lanes[lid]
            pts = np.vstack((lane.polygon[:, :2], lane.xy))
            lo = np.floor(pts.min(axis=0) / self.cell).astype(int)
            hi = np.floor(pts.max(axis=0) / self.cell).astype(int)
            for cx in range(lo[0], hi[0] + 1):
                for cy in range(lo[1], hi[1] + 1):
                    self.grid.setdefault((cx, cy), []).append(lid)

    def _cell(self, point) -> tuple[int, int]:
        return int(math.floor(point[0] / self.cell)), int(math.floor(point[1] / self.cell))

    def lane(self, lane_id: str) -> Lane:
        try:
            return self.lanes[lane_id]
        except KeyError:
            raise MapError(f"unknown lane id '{lane_id}'") from None

    def lane_successors(self, lane_id: str) -> list[str]:
        return list(self.lane(lane_id).exit_lanes)

    def in_drivable_area(self, point) -> bool:
        for lid in self.grid.get(self._cell(point), ()):
            if point_on_lane(self.lanes[lid], point):
                return True
        return False

    def lane_key(self, lane_id: str, point) -> tuple[float, float, str]:
        """Ranking key for :meth:`nearest_lane`: (distance to centerline, s, id)."""
        lane = self.lanes[lane_id]
        s, d, k = kernels.project_points(lane.xy, lane.cum_s, np.asarray(point, dtype=float)[:2])
        foot = frenet_to_cartesian(lane, s[0], 0.0)
        dist = math.hypot(point[0] - foot[0], point[1] - foot[1])
        return (dist, float(s[0]), lane_id)

    def nearest_lane(self, point) -> str:
        """Lane whose centerline is closest to ``point``; ties by smaller s, then id."""
        if not self.lanes:
            raise MapError("nearest_lane on an empty map")
        cx, cy = self._cell(point)
        seen: set[str] = set()
        best = None
        ring = 0
        while True:
            for lid in self._ring(cx, cy, ring):
                if lid not in seen:
                    seen.add(lid)
                    key = self.lane_key(lid, point)
                    if best is None or key < best:
                        best = key
            # lanes not registered within this ring lie at least ring * cell away
            if best is not None and (best[0] < ring * self.cell or len(seen) == len(self.lanes)):
                return best[2]
            if len(seen) == len(self.lanes):
                return best[2]
            ring += 1
            if ring > 8:
                for lid in self.lanes:
                    if lid not in seen:
                        key = self.lane_key(lid, point)
                        if best is None or key < best:
                            best = key
                return best[2]

    def _ring(self, cx: int, cy: int, r: int):
        if r == 0:
            yield from self.grid.get((cx, cy), ())
            return
        for x in range(cx - r, cx + r + 1):
            for y in (cy - r, cy + r):
                yield from self.grid.get((x, y), ())
        for y in range(cy - r + 1, cy + r):
            for x in (cx - r, cx + r):
                yield from self.grid.get((x, y), ())

    @cached_property
    def boundary_segments(self) -> np.ndarray:
        segs = [ln.segments for ln in self.lines.values() if ln.line_type in BOUNDARY_TYPES]
        if not segs:
            return np.zeros((0, 4))
        return np.ascontiguousarray(np.vstack(segs))
