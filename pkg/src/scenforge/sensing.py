"""Per-agent observation vectors.

Layout (in order): lidar ``n_rays`` values in [0, 1]; ego state 4 values
(steer, heading error / pi, speed / speed_norm, lateral offset / 2.5 m);
navigation 2 * ``nav_points`` values in [-1, 1]; optionally boundary
``boundary_rays`` values in [0, 1].
"""
from __future__ import annotations

import math

import numpy as np

from . import kernels

KMH = 1.0 / 3.6


def lidar_from_arrays(pose, x, y, h, length, width, mask, n_rays=120, max_dist=50.0,
                      noise_std=0.0, rng=None) -> np.ndarray:
    """Normalized box raycast; noise is added before clipping to [0, 1]."""
    ox, oy, oh = pose
    dist = kernels.raycast_boxes(ox, oy, oh, n_rays, max_dist, x, y, h, length, width, mask)
    out = dist / max_dist
    if noise_std > 0.0:
        out = out + rng.normal(0.0, noise_std, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def ego_state_vector(pose, speed, steer, ref_xy, ref_s, speed_norm=80.0 * KMH,
                     lat_norm=2.5) -> np.ndarray:
    x, y, h = pose
    s, d, k = kernels.project_points(ref_xy, ref_s, np.array([[x, y]]))
    k = int(k[0])
    e = ref_xy[k + 1] - ref_xy[k]
    err = (h - math.atan2(e[1], e[0]) + math.pi) % (2.0 * math.pi) - math.pi
    return np.array([
        min(1.0, max(-1.0, steer)),
        err / math.pi,
        min(1.0, max(0.0, speed / speed_norm)),
        min(1.0, max(-1.0, float(d[0]) / lat_norm)),
    ])


def navigation_points(ref_xy, ref_s, pose, n=10, spacing=2.0, norm=50.0) -> np.ndarray:
    """Points ``k * spacing`` (k = 1..n) ahead on the reference, in the vehicle frame."""
    x, y, h = pose
    s, _, _ = kernels.project_points(ref_xy, ref_s, np.array([[x, y]]))
    total = ref_s[-1]
    targets = np.minimum(s[0] + spacing * np.arange(1, n + 1), total)
    k = np.clip(np.searchsorted(ref_s, targets, side="right") - 1, 0, len(ref_s) - 2)
    seg = ref_s[k + 1] - ref_s[k]
    t = (targets - ref_s[k]) / seg
    pts = ref_xy[k] + t[:, None] * (ref_xy[k + 1] - ref_xy[k])
    dx, dy = pts[:, 0] - x, pts[:, 1] - y
    c, sn = math.cos(h), math.sin(h)
    local = np.column_stack((c * dx + sn * dy, -sn * dx + c * dy))
    return np.clip(local / norm, -1.0, 1.0).reshape(-1)


def boundary_from_segments(pose, segs, n_rays=12, max_dist=50.0) -> np.ndarray:
    ox, oy, oh = pose
    if segs.shape[0] == 0:
        return np.ones(n_rays)
    return np.clip(kernels.raycast_segments(ox, oy, oh, n_rays, max_dist, segs) / max_dist, 0.0, 1.0)


# -- world-facing wrappers -----------------------------------------------------


def _pose(world, i):
    ta = world.ta
    return float(ta.x[i]), float(ta.y[i]), float(ta.h[i])


def lidar_scan(world, agent_id, n_rays=None, max_dist=None, noise_std=None) -> np.ndarray:
    cfg, ta = world.cfg, world.ta
    i = world.agents[agent_id].index
    mask = ta.alive.copy()
    mask[i] = 0
    return lidar_from_arrays(
        _pose(world, i), ta.x, ta.y, ta.h, ta.length, ta.width, mask,
        cfg.lidar_rays if n_rays is None else n_rays,
        cfg.lidar_range if max_dist is None else max_dist,
        cfg.lidar_noise if noise_std is None else noise_std, world.rng)


def ego_state(world, agent_id) -> np.ndarray:
    ag = world.agents[agent_id]
    return ego_state_vector(_pose(world, ag.index), float(world.ta.v[ag.index]), ag.steer,
                            ag.ref_xy, ag.ref_s, world.cfg.speed_norm_kmh * KMH, world.cfg.out_of_route)


def navigation(world, agent_id) -> np.ndarray:
    ag, cfg = world.agents[agent_id], world.cfg
    return navigation_points(ag.ref_xy, ag.ref_s, _pose(world, ag.index), cfg.nav_points, cfg.nav_spacing)


def boundary_scan(world, agent_id, n_rays=None, max_dist=None) -> np.ndarray:
    cfg = world.cfg
    return boundary_from_segments(_pose(world, world.agents[agent_id].index), world.map.boundary_segments,
                                  cfg.boundary_rays if n_rays is None else n_rays,
                                  cfg.lidar_range if max_dist is None else max_dist)


def observe(world, agent_id) -> np.ndarray:
    parts = [lidar_scan(world, agent_id), ego_state(world, agent_id), navigation(world, agent_id)]
    if world.cfg.use_boundary:
        parts.append(boundary_scan(world, agent_id))
    return np.concatenate(parts)


def observation_layout(cfg) -> list[dict]:
    """Field-by-field description: name, offset, size, value range."""
    fields = [("lidar", cfg.lidar_rays, [0.0, 1.0]),
              ("ego_state", 4, [-1.0, 1.0]),
              ("navigation", 2 * cfg.nav_points, [-1.0, 1.0])]
    if cfg.use_boundary:
        fields.append(("boundary", cfg.boundary_rays, [0.0, 1.0]))
    out, off = [], 0
    for name, size, rng in fields:
        out.append({"name": name, "offset": off, "size": size, "range": rng})
        off += size
    return out


def observation_size(cfg) -> int:
    return sum(f["size"] for f in observation_layout(cfg))
