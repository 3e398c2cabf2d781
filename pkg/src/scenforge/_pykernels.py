"""Numpy implementations of the geometry and traffic kernels.

This module is the reference path. ``_ckernels.pyx`` implements the same
functions with the same signatures and the same floating-point operation
order; ``scenforge.kernels`` picks one at import time.
"""
from __future__ import annotations

import math

import numpy as np

TWO_PI = 2.0 * math.pi

# params vector layout shared with the compiled kernels
P_S0, P_T, P_AMAX, P_B, P_DELTA, P_BHARD, P_DT, P_LOOKAHEAD, P_MARGIN = range(9)
N_PARAMS = 9
GAP_GUARD = 0.25


def project_points(xy, cum_s, pts):
    """Project points onto a polyline.

    Returns ``(s, d, seg)`` arrays. The nearest segment wins (first one on
    ties). ``d`` is the signed perpendicular offset when the foot lies on the
    segment or beyond either polyline end, and the signed euclidean distance
    when the foot is clamped at an interior vertex.
    """
    xy = np.asarray(xy, dtype=np.float64)
    cum_s = np.asarray(cum_s, dtype=np.float64)
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    ax = xy[:-1, 0]
    ay = xy[:-1, 1]
    ex = xy[1:, 0] - ax
    ey = xy[1:, 1] - ay
    seglen = cum_s[1:] - cum_s[:-1]
    len2 = ex * ex + ey * ey
    nseg = ax.shape[0]
    first = cum_s[0]
    total = cum_s[-1]
    out_s = np.empty(pts.shape[0])
    out_d = np.empty(pts.shape[0])
    out_k = np.empty(pts.shape[0], dtype=np.int64)
    chunk = max(1, 2_000_000 // max(nseg, 1))
    for lo in range(0, pts.shape[0], chunk):
        p = pts[lo:lo + chunk]
        wx = p[:, 0:1] - ax
        wy = p[:, 1:2] - ay
        traw = (wx * ex + wy * ey) / len2
        t = np.clip(traw, 0.0, 1.0)
        fx = wx - t * ex
        fy = wy - t * ey
        dist2 = fx * fx + fy * fy
        k = np.argmin(dist2, axis=1)
        rows = np.arange(p.shape[0])
        tk = t[rows, k]
        tr = traw[rows, k]
        cross = ex[k] * wy[rows, k] - ey[k] * wx[rows, k]
        lateral = cross / np.sqrt(len2[k])
        euclid = np.copysign(np.sqrt(dist2[rows, k]), cross)
        perp = ((tr >= 0.0) & (tr <= 1.0)) | ((tr < 0.0) & (k == 0)) | ((tr > 1.0) & (k == nseg - 1))
        s = cum_s[k] + tk * seglen[k]
        out_s[lo:lo + chunk] = np.clip(s, first, total)
        out_d[lo:lo + chunk] = np.where(perp, lateral, euclid)
        out_k[lo:lo + chunk] = k
    return out_s, out_d, out_k


def points_in_polygon(poly, pts, eps=1e-12):
    """Even-odd containment; points within ``eps`` of an edge count as inside."""
    poly = np.asarray(poly, dtype=np.float64)
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    if np.array_equal(poly[0], poly[-1]):
        poly = poly[:-1]
    ax = poly[:, 0]
    ay = poly[:, 1]
    bx = np.roll(ax, -1)
    by = np.roll(ay, -1)
    px = pts[:, 0:1]
    py = pts[:, 1:2]
    ex = bx - ax
    ey = by - ay
    len2 = ex * ex + ey * ey
    t = np.clip(((px - ax) * ex + (py - ay) * ey) / np.where(len2 > 0, len2, 1.0), 0.0, 1.0)
    qx = px - (ax + t * ex)
    qy = py - (ay + t * ey)
    on_edge = np.any(qx * qx + qy * qy <= eps * eps, axis=1)
    straddle = (ay > py) != (by > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = ax + (py - ay) * ex / ey
    crossing = straddle & (px < xint)
    inside = (np.count_nonzero(crossing, axis=1) % 2) == 1
    return inside | on_edge


def obb_overlap(a, b):
    """Separating-axis test for two boxes given as (cx, cy, heading, length, width)."""
    ca, sa = math.cos(a[2]), math.sin(a[2])
    cb, sb = math.cos(b[2]), math.sin(b[2])
    dx = b[0] - a[0]
    dy = b[1] - a[1]
    for ux, uy in ((ca, sa), (-sa, ca), (cb, sb), (-sb, cb)):
        ra = 0.5 * a[3] * abs(ux * ca + uy * sa) + 0.5 * a[4] * abs(-ux * sa + uy * ca)
        rb = 0.5 * b[3] * abs(ux * cb + uy * sb) + 0.5 * b[4] * abs(-ux * sb + uy * cb)
        if abs(ux * dx + uy * dy) > ra + rb:
            return False
    return True


def collision_pairs(x, y, h, length, width, alive):
    """All overlapping (i, j) pairs with i < j among alive boxes, as an (P, 2) array."""
    idx = np.flatnonzero(alive)
    if idx.size < 2:
        return np.empty((0, 2), dtype=np.int64)
    cx = x[idx]
    cy = y[idx]
    rad = 0.5 * np.hypot(length[idx], width[idx])
    dx = cx[:, None] - cx[None, :]
    dy = cy[:, None] - cy[None, :]
    reach = rad[:, None] + rad[None, :]
    near = (dx * dx + dy * dy) <= reach * reach
    ii, jj = np.nonzero(np.triu(near, 1))
    pairs = []
    for a, b in zip(idx[ii], idx[jj]):
        if obb_overlap((x[a], y[a], h[a], length[a], width[a]),
                       (x[b], y[b], h[b], length[b], width[b])):
            pairs.append((a, b))
    if not pairs:
        return np.empty((0, 2), dtype=np.int64)
    return np.asarray(pairs, dtype=np.int64)


def raycast_boxes(ox, oy, heading, n_rays, max_dist, x, y, h, length, width, mask):
    """Distance along each of ``n_rays`` evenly spaced rays to the first box hit.

    Rays start at ``heading`` and go counter-clockwise. Misses read
    ``max_dist``; an origin inside a box reads 0.
    """
    out = np.full(n_rays, float(max_dist))
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return out
    ang = heading + TWO_PI * np.arange(n_rays) / n_rays
    dxr = np.cos(ang)[:, None]
    dyr = np.sin(ang)[:, None]
    c = np.cos(h[idx])[None, :]
    s = np.sin(h[idx])[None, :]
    rx = ox - x[idx][None, :]
    ry = oy - y[idx][None, :]
    lox = rx * c + ry * s
    loy = -rx * s + ry * c
    ldx = dxr * c + dyr * s
    ldy = -dxr * s + dyr * c
    hl = 0.5 * length[idx][None, :]
    hw = 0.5 * width[idx][None, :]
    tmin, tmax = _slab(lox, ldx, hl)
    tmin2, tmax2 = _slab(loy, ldy, hw)
    lo = np.maximum(tmin, tmin2)
    hi = np.minimum(tmax, tmax2)
    hit = (hi >= np.maximum(lo, 0.0)) & (lo <= max_dist)
    dist = np.where(hit, np.maximum(lo, 0.0), np.inf)
    best = dist.min(axis=1)
    return np.minimum(out, best)


def _slab(o, d, half):
    o, d = np.broadcast_arrays(o, d)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    par = np.abs(d) < 1e-300
    inside = np.abs(o) <= half
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    return tmin, tmax


def raycast_segments(ox, oy, heading, n_rays, max_dist, segs):
    """Like :func:`raycast_boxes` but against line segments (S, 4) = (x0, y0, x1, y1)."""
    out = np.full(n_rays, float(max_dist))
    segs = np.asarray(segs, dtype=np.float64).reshape(-1, 4)
    if segs.shape[0] == 0:
        return out
    ang = heading + TWO_PI * np.arange(n_rays) / n_rays
    dxr = np.cos(ang)[:, None]
    dyr = np.sin(ang)[:, None]
    px = segs[None, :, 0] - ox
    py = segs[None, :, 1] - oy
    ex = segs[None, :, 2] - segs[None, :, 0]
    ey = segs[None, :, 3] - segs[None, :, 1]
    denom = dxr * ey - dyr * ex
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (px * ey - py * ex) / denom
        u = (px * dyr - py * dxr) / denom
    ok = (np.abs(denom) > 1e-300) & (t >= 0.0) & (u >= 0.0) & (u <= 1.0)
    dist = np.where(ok, t, np.inf).min(axis=1)
    return np.minimum(out, dist)


def idm_accel(v, v0, gap, dv, params):
    """IDM acceleration, clipped to [-b_hard, a_max]. ``gap < 0`` means no leader."""
    a_max = params[P_AMAX]
    free = 1.0 - math.pow(v / v0, params[P_DELTA]) if v0 > 0.0 else -math.inf
    if gap >= 0.0:
        dyn = v * params[P_T] + v * dv / (2.0 * math.sqrt(a_max * params[P_B]))
        s_star = params[P_S0] + (dyn if dyn > 0.0 else 0.0)
        g = gap if gap > 1e-3 else 1e-3
        acc = a_max * (free - (s_star / g) * (s_star / g))
    else:
        acc = a_max * free
    if acc > a_max:
        return a_max
    if acc < -params[P_BHARD]:
        return -params[P_BHARD]
    return acc


def locate(ps, p0, p1, s):
    """Index of the path segment containing arc length ``s`` (clamped)."""
    k = int(np.searchsorted(ps[p0:p1], s, side="right")) - 1
    last = p1 - p0 - 2
    if k < 0:
        k = 0
    if k > last:
        k = last
    return p0 + k


def _window_end(ps, p0, p1, s_end):
    k = int(np.searchsorted(ps[p0:p1], s_end, side="left"))
    return min(p0 + k, p1 - 1)


def leader_scan(x, y, h, v, length, width, alive, idm, px, py, ps, p0, p1, sp, lat,
                params, leader, gap, dv):
    """Find the leader of every alive IDM object along its path corridor.

    Fills ``leader`` (object index or -1), ``gap`` (net bumper gap, -1 if no
    leader) and ``dv`` (closing speed along the path).
    """
    look = params[P_LOOKAHEAD]
    margin = params[P_MARGIN]
    alive_idx = np.flatnonzero(alive)
    for k in range(idm.shape[0]):
        i = idm[k]
        leader[k] = -1
        gap[k] = -1.0
        dv[k] = 0.0
        if not alive[i] or p1[k] - p0[k] < 2:
            continue
        a0 = locate(ps, p0[k], p1[k], sp[k])
        a1 = _window_end(ps, p0[k], p1[k], sp[k] + look + 0.5 * length[i] + 10.0)
        if a1 <= a0:
            a1 = a0 + 1
        others = alive_idx[alive_idx != i]
        if others.size == 0:
            continue
        reach = look + 0.5 * length[i] + 0.5 * (length[others] + width[others]) + 1.0
        ddx = x[others] - x[i]
        ddy = y[others] - y[i]
        cand = others[ddx * ddx + ddy * ddy <= reach * reach]
        if cand.size == 0:
            continue
        seg_x = px[a0:a1 + 1]
        seg_y = py[a0:a1 + 1]
        seg_s = ps[a0:a1 + 1]
        s_j, d_j, kk = project_points(np.column_stack((seg_x, seg_y)), seg_s,
                                      np.column_stack((x[cand], y[cand])))
        tang = np.arctan2(seg_y[kk + 1] - seg_y[kk], seg_x[kk + 1] - seg_x[kk])
        ds = s_j - sp[k]
        dth = h[cand] - tang
        cdt = np.abs(np.cos(dth))
        sdt = np.abs(np.sin(dth))
        lat_ext = 0.5 * length[cand] * sdt + 0.5 * width[cand] * cdt
        lon_ext = 0.5 * length[cand] * cdt + 0.5 * width[cand] * sdt
        g = ds - 0.5 * length[i] - lon_ext
        ok = (ds > 0.0) & (np.abs(d_j - lat[k]) - lat_ext < 0.5 * width[i] + margin) & (g <= look)
        if not ok.any():
            continue
        pos = np.flatnonzero(ok)
        best = pos[np.argmin(g[pos])]
        j = cand[best]
        leader[k] = j
        gap[k] = g[best] if g[best] > 0.0 else 0.0
        dv[k] = v[i] - v[j] * math.cos(dth[best])


def path_pose(px, py, ps, p0, p1, s, lat):
    """Pose (x, y, heading) at arc length ``s`` offset ``lat`` to the left."""
    k = locate(ps, p0, p1, s)
    seg = ps[k + 1] - ps[k]
    t = (s - ps[k]) / seg if seg > 0.0 else 0.0
    ex = px[k + 1] - px[k]
    ey = py[k + 1] - py[k]
    hd = math.atan2(ey, ex)
    cx = px[k] + t * ex
    cy = py[k] + t * ey
    if lat != 0.0:
        cx = cx - lat * math.sin(hd)
        cy = cy + lat * math.cos(hd)
    return cx, cy, hd


def idm_step(x, y, h, v, length, width, alive, idm, px, py, ps, p0, p1, sp, v0, lat,
             params, leader, gap, dv):
    """Advance every alive IDM object by one tick along its path.

    All accelerations are computed from the pre-step state, then applied.
    Objects that reach the end of their path are marked not alive.
    """
    leader_scan(x, y, h, v, length, width, alive, idm, px, py, ps, p0, p1, sp, lat,
                params, leader, gap, dv)
    dt = params[P_DT]
    m = idm.shape[0]
    acc = np.zeros(m)
    for k in range(m):
        i = idm[k]
        if alive[i] and p1[k] - p0[k] >= 2:
            acc[k] = idm_accel(v[i], v0[k], gap[k], dv[k], params)
    for k in range(m):
        i = idm[k]
        if not alive[i]:
            continue
        if p1[k] - p0[k] < 2:
            v[i] = 0.0
            continue
        vi = v[i]
        a = acc[k]
        vn = vi + a * dt
        if vn < 0.0:
            step = (vi * vi) / (-2.0 * a) if a < 0.0 else 0.0
            vn = 0.0
        else:
            step = vi * dt + 0.5 * a * dt * dt
        if leader[k] >= 0:
            room = gap[k] - GAP_GUARD
            if room < 0.0:
                room = 0.0
            if step > room:
                step = room
                if vn > room / dt:
                    vn = room / dt
        end = ps[p1[k] - 1]
        snew = sp[k] + step
        if snew >= end:
            snew = end
            alive[i] = False
        sp[k] = snew
        v[i] = vn
        cx, cy, hd = path_pose(px, py, ps, p0[k], p1[k], snew, lat[k])
        x[i] = cx
        y[i] = cy
        h[i] = hd
