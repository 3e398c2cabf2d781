"""Backend selection for the hot geometry and traffic kernels.

The compiled extension ``_ckernels`` is used when it imports; otherwise the
numpy implementation in ``_pykernels`` is used. Set ``SCENFORGE_PURE_PYTHON=1``
to force the numpy path. Both expose the same functions; the wrappers here
coerce array dtypes so callers never care which one is active.
"""
from __future__ import annotations

import os
from types import ModuleType

import numpy as np

from . import _pykernels

N_PARAMS = _pykernels.N_PARAMS
GAP_GUARD = _pykernels.GAP_GUARD


def _load() -> tuple[ModuleType, str]:
    if os.environ.get("SCENFORGE_PURE_PYTHON", "") not in ("", "0"):
        return _pykernels, "python"
    try:
        from . import _ckernels  # type: ignore[attr-defined]
    except ImportError:
        return _pykernels, "python"
    return _ckernels, "compiled"


_impl, BACKEND = _load()


def backends() -> dict[str, ModuleType]:
    """All importable backends by name (used by tests and the benchmark)."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels  # type: ignore[attr-defined]
    except ImportError:
        return out
    out["compiled"] = _ckernels
    return out


def _f(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def _u8(a) -> np.ndarray:
    a = np.ascontiguousarray(a)
    if a.dtype == np.bool_:
        return a.view(np.uint8)
    return a.astype(np.uint8)


def project_points(xy, cum_s, pts, impl: ModuleType | None = None):
    return (impl or _impl).project_points(_f(xy), _f(cum_s), _f(np.atleast_2d(pts)))


def points_in_polygon(poly, pts, eps: float = 1e-12, impl: ModuleType | None = None):
    return (impl or _impl).points_in_polygon(_f(poly), _f(np.atleast_2d(pts)), eps)


def obb_overlap(a, b, impl: ModuleType | None = None) -> bool:
    return bool((impl or _impl).obb_overlap(tuple(map(float, a)), tuple(map(float, b))))


def collision_pairs(x, y, h, length, width, alive, impl: ModuleType | None = None):
    return (impl or _impl).collision_pairs(_f(x), _f(y), _f(h), _f(length), _f(width), _u8(alive))


def raycast_boxes(ox, oy, heading, n_rays, max_dist, x, y, h, length, width, mask,
                  impl: ModuleType | None = None):
    return (impl or _impl).raycast_boxes(float(ox), float(oy), float(heading), int(n_rays),
                                         float(max_dist), _f(x), _f(y), _f(h), _f(length),
                                         _f(width), _u8(mask))


def raycast_segments(ox, oy, heading, n_rays, max_dist, segs, impl: ModuleType | None = None):
    return (impl or _impl).raycast_segments(float(ox), float(oy), float(heading), int(n_rays),
                                            float(max_dist), _f(np.reshape(segs, (-1, 4))))


def idm_accel(v, v0, gap, dv, params, impl: ModuleType | None = None) -> float:
    return float((impl or _impl).idm_accel(float(v), float(v0), float(gap), float(dv), _f(params)))


def leader_scan(state, impl: ModuleType | None = None):
    """Run the leader scan on a :class:`TrafficArrays` bundle (results land in it)."""
    s = state
    (impl or _impl).leader_scan(s.x, s.y, s.h, s.v, s.length, s.width, s.alive, s.idm,
                                s.px, s.py, s.ps, s.p0, s.p1, s.sp, s.lat, s.params,
                                s.leader, s.gap, s.dv)


def idm_step(state, impl: ModuleType | None = None):
    """Advance the IDM objects of a :class:`TrafficArrays` bundle in place."""
    s = state
    (impl or _impl).idm_step(s.x, s.y, s.h, s.v, s.length, s.width, s.alive, s.idm,
                             s.px, s.py, s.ps, s.p0, s.p1, s.sp, s.v0, s.lat, s.params,
                             s.leader, s.gap, s.dv)


def path_pose(px, py, ps, p0, p1, s, lat, impl: ModuleType | None = None):
    return (impl or _impl).path_pose(px, py, ps, int(p0), int(p1), float(s), float(lat))


class TrafficArrays:
    """Struct-of-arrays view of the objects an IDM kernel call reads and writes.

    Object arrays (length n): ``x, y, h, v, length, width, alive``.
    Per-IDM-entry arrays (length m): ``idm`` (object index), ``p0, p1``
    (slice of the concatenated path arrays), ``sp`` (arc length on path),
    ``v0`` (desired speed), ``lat`` (lateral offset), plus the outputs
    ``leader, gap, dv``. ``alive`` is stored as uint8.
    """

    def __init__(self, n: int, paths: list[np.ndarray], idm_index, params):
        self.x = np.zeros(n)
        self.y = np.zeros(n)
        self.h = np.zeros(n)
        self.v = np.zeros(n)
        self.length = np.ones(n)
        self.width = np.ones(n)
        self.alive = np.zeros(n, dtype=np.uint8)
        self.idm = np.ascontiguousarray(idm_index, dtype=np.int64)
        m = self.idm.shape[0]
        self.set_paths(paths)
        self.sp = np.zeros(m)
        self.v0 = np.zeros(m)
        self.lat = np.zeros(m)
        self.params = _f(params)
        self.leader = np.full(m, -1, dtype=np.int64)
        self.gap = np.full(m, -1.0)
        self.dv = np.zeros(m)

    def set_paths(self, paths: list[np.ndarray]) -> None:
        """Replace the concatenated path storage; each path is an (K, 2) array."""
        xs, ys, ss, p0, p1 = [], [], [], [], []
        offset = 0
        for path in paths:
            path = np.asarray(path, dtype=np.float64).reshape(-1, 2)
            xs.append(path[:, 0])
            ys.append(path[:, 1])
            ss.append(arc_length(path))
            p0.append(offset)
            offset += path.shape[0]
            p1.append(offset)
        self.px = _f(np.concatenate(xs)) if xs else np.zeros(0)
        self.py = _f(np.concatenate(ys)) if ys else np.zeros(0)
        self.ps = _f(np.concatenate(ss)) if ss else np.zeros(0)
        self.p0 = np.asarray(p0, dtype=np.int64)
        self.p1 = np.asarray(p1, dtype=np.int64)

    def path_length(self, k: int) -> float:
        if self.p1[k] - self.p0[k] < 1:
            return 0.0
        return float(self.ps[self.p1[k] - 1])


def arc_length(xy) -> np.ndarray:
    """Cumulative arc length along a polyline, starting at 0."""
    xy = np.asarray(xy, dtype=np.float64)
    if xy.shape[0] == 0:
        return np.zeros(0)
    seg = np.hypot(np.diff(xy[:, 0]), np.diff(xy[:, 1]))
    return np.concatenate(([0.0], np.cumsum(seg)))
