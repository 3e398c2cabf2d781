"""Independent brute-force geometry used as test oracles."""
from __future__ import annotations

import numpy as np


def dense_polyline(xy, step=0.01):
    """Points every ``step`` meters along a polyline, with their arc length."""
    pts, ss = [], []
    s0 = 0.0
    for a, b in zip(xy[:-1], xy[1:]):
        seg = float(np.hypot(*(b - a)))
        m = max(1, int(np.ceil(seg / step)))
        t = np.arange(m) / m
        pts.append(a + t[:, None] * (b - a))
        ss.append(s0 + t * seg)
        s0 += seg
    pts.append(xy[-1:])
    ss.append(np.array([s0]))
    return np.vstack(pts), np.concatenate(ss)


def dense_distance(xy, pts, step=0.01):
    """Distance from each point to a polyline sampled every ``step`` meters.

    The nearest sample is refined against the two 1-step chords around it;
    the bare sample alone is off by up to ``step / 2`` for points on the line.
    Also returns whether the nearest sample is an interior one.
    """
    dense, _ = dense_polyline(xy, step)
    out, interior = [], []
    for p in np.asarray(pts, float):
        k = int(np.hypot(dense[:, 0] - p[0], dense[:, 1] - p[1]).argmin())
        best = float(np.hypot(*(dense[k] - p)))
        for j in (k - 1, k):
            if 0 <= j < len(dense) - 1:
                best = min(best, seg_point_distance(dense[j], dense[j + 1], p))
        out.append(best)
        interior.append(0 < k < len(dense) - 1)
    return np.array(out), np.array(interior)


def box_contains(box, pts, eps=0.0):
    """Containment in an oriented rectangle (x, y, heading, length, width) via local coordinates."""
    x, y, h, ln, wd = box
    dx, dy = pts[..., 0] - x, pts[..., 1] - y
    c, s = np.cos(h), np.sin(h)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= ln / 2 + eps) & (np.abs(v) <= wd / 2 + eps)


def box_samples(box, n, rng):
    x, y, h, ln, wd = box
    u = rng.uniform(-ln / 2, ln / 2, n)
    v = rng.uniform(-wd / 2, wd / 2, n)
    c, s = np.cos(h), np.sin(h)
    return np.column_stack((x + c * u - s * v, y + s * u + c * v))


def box_corners(box):
    x, y, h, ln, wd = box
    c, s = np.cos(h), np.sin(h)
    loc = np.array([(ln / 2, wd / 2), (-ln / 2, wd / 2), (-ln / 2, -wd / 2), (ln / 2, -wd / 2)])
    return np.column_stack((x + c * loc[:, 0] - s * loc[:, 1], y + s * loc[:, 0] + c * loc[:, 1]))


def march_ray(origin, angle, max_dist, inside, step=0.01, tol=1e-5):
    """First distance where ``inside(point)`` holds, by 1 cm marching then bisection."""
    d = np.array((np.cos(angle), np.sin(angle)))
    ts = np.arange(0.0, max_dist + step, step)
    ts[-1] = min(ts[-1], max_dist)
    hits = inside(origin + ts[:, None] * d)
    k = np.flatnonzero(hits)
    if k.size == 0:
        return max_dist
    k = int(k[0])
    if k == 0:
        return 0.0
    lo, hi = ts[k - 1], ts[k]
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if inside((origin + mid * d)[None, :])[0]:
            hi = mid
        else:
            lo = mid
    return hi


def ray_box_chord(origin, angle, box, max_dist):
    """Length of the ray inside ``box`` within ``[0, max_dist]`` (slab clipping), 0 if it misses."""
    x, y, h, ln, wd = box
    d = np.array((np.cos(angle), np.sin(angle)))
    c, s = np.cos(h), np.sin(h)
    o = np.asarray(origin, float) - (x, y)
    lo, hi = 0.0, max_dist
    for u, v, half in ((c * o[0] + s * o[1], c * d[0] + s * d[1], ln / 2),
                       (-s * o[0] + c * o[1], -s * d[0] + c * d[1], wd / 2)):
        if v == 0.0:
            if abs(u) > half:
                return 0.0
            continue
        t1, t2 = sorted(((-half - u) / v, (half - u) / v))
        lo, hi = max(lo, t1), min(hi, t2)
    return max(0.0, hi - lo)


def winding_number(poly, p):
    """Winding number of a closed ring around ``p``."""
    wn = 0
    for a, b in zip(poly[:-1], poly[1:]):
        cross = (b[0] - a[0]) * (p[1] - a[1]) - (p[0] - a[0]) * (b[1] - a[1])
        if a[1] <= p[1]:
            if b[1] > p[1] and cross > 0:
                wn += 1
        elif b[1] <= p[1] and cross < 0:
            wn -= 1
    return wn


def seg_point_distance(a, b, p):
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0.0, 1.0)
    return float(np.hypot(*(a + t * ab - p)))


def segments_properly_intersect(p1, p2, q1, q2):
    def orient(a, b, c):
        return np.sign((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))

    return (orient(p1, p2, q1) * orient(p1, p2, q2) < 0) and (orient(q1, q2, p1) * orient(q1, q2, p2) < 0)


def brute_arclength(xy, p):
    """Arc length of the closest point on a polyline, scanning every segment in plain Python."""
    best_d, best_s, s0 = float("inf"), 0.0, 0.0
    for (ax, ay), (bx, by) in zip(xy[:-1].tolist(), xy[1:].tolist()):
        ux, uy = bx - ax, by - ay
        seg2 = ux * ux + uy * uy
        t = min(1.0, max(0.0, ((p[0] - ax) * ux + (p[1] - ay) * uy) / seg2))
        d = ((ax + t * ux - p[0]) ** 2 + (ay + t * uy - p[1]) ** 2) ** 0.5
        if d < best_d:
            best_d, best_s = d, s0 + t * seg2 ** 0.5
        s0 += seg2 ** 0.5
    return best_s, s0
