# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_pykernels``.

Same signatures, same operation order. Boolean masks arrive as uint8 views.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, atan2, cos, sin, fabs, pow, copysign, INFINITY

cnp.import_array()

DEF P_S0 = 0
DEF P_T = 1
DEF P_AMAX = 2
DEF P_B = 3
DEF P_DELTA = 4
DEF P_BHARD = 5
DEF P_DT = 6
DEF P_LOOKAHEAD = 7
DEF P_MARGIN = 8
DEF GAP_GUARD = 0.25
DEF TWO_PI = 6.283185307179586


cdef inline void _project_one(const double[::1] px, const double[::1] py, const double[::1] ps,
                              Py_ssize_t a0, Py_ssize_t a1, double qx, double qy,
                              double* out_s, double* out_d, Py_ssize_t* out_k) noexcept nogil:
    # segments a0..a1-1 (vertices a0..a1)
    cdef Py_ssize_t k, best = a0
    cdef double ex, ey, wx, wy, len2, traw, t, fx, fy, d2
    cdef double best_d2 = INFINITY, best_t = 0.0, best_traw = 0.0
    for k in range(a0, a1):
        ex = px[k + 1] - px[k]
        ey = py[k + 1] - py[k]
        wx = qx - px[k]
        wy = qy - py[k]
        len2 = ex * ex + ey * ey
        traw = (wx * ex + wy * ey) / len2
        t = traw
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        fx = wx - t * ex
        fy = wy - t * ey
        d2 = fx * fx + fy * fy
        if d2 < best_d2:
            best_d2 = d2
            best = k
            best_t = t
            best_traw = traw
    ex = px[best + 1] - px[best]
    ey = py[best + 1] - py[best]
    wx = qx - px[best]
    wy = qy - py[best]
    len2 = ex * ex + ey * ey
    cdef double cross = ex * wy - ey * wx
    cdef bint perp = (best_traw >= 0.0 and best_traw <= 1.0) or \
        (best_traw < 0.0 and best == a0) or (best_traw > 1.0 and best == a1 - 1)
    if perp:
        out_d[0] = cross / sqrt(len2)
    else:
        out_d[0] = copysign(sqrt(best_d2), cross)
    cdef double s = ps[best] + best_t * (ps[best + 1] - ps[best])
    if s < ps[a0]:
        s = ps[a0]
    if s > ps[a1]:
        s = ps[a1]
    out_s[0] = s
    out_k[0] = best


def project_points(xy, cum_s, pts):
    cdef double[:, ::1] p = np.ascontiguousarray(np.atleast_2d(pts), dtype=np.float64)
    cdef double[::1] px = np.ascontiguousarray(np.asarray(xy, dtype=np.float64)[:, 0])
    cdef double[::1] py = np.ascontiguousarray(np.asarray(xy, dtype=np.float64)[:, 1])
    cdef double[::1] ps = np.ascontiguousarray(cum_s, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0], i, nseg = px.shape[0] - 1
    out_s = np.empty(n)
    out_d = np.empty(n)
    out_k = np.empty(n, dtype=np.int64)
    cdef double[::1] os_ = out_s
    cdef double[::1] od = out_d
    cdef long long[::1] ok = out_k
    cdef double s, d
    cdef Py_ssize_t k
    with nogil:
        for i in range(n):
            _project_one(px, py, ps, 0, nseg, p[i, 0], p[i, 1], &s, &d, &k)
            os_[i] = s
            od[i] = d
            ok[i] = k
    # the numpy path clips to [0, total] with the first vertex at zero
    return out_s, out_d, out_k


def points_in_polygon(poly, pts, double eps=1e-12):
    arr = np.asarray(poly, dtype=np.float64)
    if arr.shape[0] > 1 and arr[0, 0] == arr[-1, 0] and arr[0, 1] == arr[-1, 1]:
        arr = arr[:-1]
    cdef double[:, ::1] pg = np.ascontiguousarray(arr)
    cdef double[:, ::1] q = np.ascontiguousarray(np.atleast_2d(pts), dtype=np.float64)
    cdef Py_ssize_t n = q.shape[0], m = pg.shape[0], i, j, jn
    out = np.zeros(n, dtype=bool)
    cdef cnp.uint8_t[::1] o = out.view(np.uint8)
    cdef double px, py, ax, ay, bx, by, ex, ey, len2, t, dx, dy, xint
    cdef bint inside, edge
    cdef double eps2 = eps * eps
    with nogil:
        for i in range(n):
            px = q[i, 0]
            py = q[i, 1]
            inside = False
            edge = False
            for j in range(m):
                jn = j + 1
                if jn == m:
                    jn = 0
                ax = pg[j, 0]
                ay = pg[j, 1]
                bx = pg[jn, 0]
                by = pg[jn, 1]
                ex = bx - ax
                ey = by - ay
                len2 = ex * ex + ey * ey
                t = ((px - ax) * ex + (py - ay) * ey) / (len2 if len2 > 0 else 1.0)
                if t < 0.0:
                    t = 0.0
                elif t > 1.0:
                    t = 1.0
                dx = px - (ax + t * ex)
                dy = py - (ay + t * ey)
                if dx * dx + dy * dy <= eps2:
                    edge = True
                if (ay > py) != (by > py):
                    xint = ax + (py - ay) * ex / ey
                    if px < xint:
                        inside = not inside
            o[i] = inside or edge
    return out


cdef inline bint _obb_overlap(double ax, double ay, double ah, double al, double aw,
                              double bx, double by, double bh, double bl, double bw) noexcept nogil:
    cdef double ca = cos(ah), sa = sin(ah), cb = cos(bh), sb = sin(bh)
    cdef double dx = bx - ax, dy = by - ay
    cdef double ux[4]
    cdef double uy[4]
    cdef int k
    cdef double ra, rb
    ux[0] = ca; uy[0] = sa
    ux[1] = -sa; uy[1] = ca
    ux[2] = cb; uy[2] = sb
    ux[3] = -sb; uy[3] = cb
    for k in range(4):
        ra = 0.5 * al * fabs(ux[k] * ca + uy[k] * sa) + 0.5 * aw * fabs(-ux[k] * sa + uy[k] * ca)
        rb = 0.5 * bl * fabs(ux[k] * cb + uy[k] * sb) + 0.5 * bw * fabs(-ux[k] * sb + uy[k] * cb)
        if fabs(ux[k] * dx + uy[k] * dy) > ra + rb:
            return False
    return True


def obb_overlap(a, b):
    return bool(_obb_overlap(a[0], a[1], a[2], a[3], a[4], b[0], b[1], b[2], b[3], b[4]))


def collision_pairs(const double[::1] x, const double[::1] y, const double[::1] h,
                    const double[::1] length, const double[::1] width, const cnp.uint8_t[::1] alive):
    cdef Py_ssize_t n = x.shape[0], i, j
    cdef double dx, dy, reach, ri, rj
    pairs = []
    for i in range(n):
        if not alive[i]:
            continue
        ri = 0.5 * sqrt(length[i] * length[i] + width[i] * width[i])
        for j in range(i + 1, n):
            if not alive[j]:
                continue
            rj = 0.5 * sqrt(length[j] * length[j] + width[j] * width[j])
            dx = x[i] - x[j]
            dy = y[i] - y[j]
            reach = ri + rj
            if dx * dx + dy * dy > reach * reach:
                continue
            if _obb_overlap(x[i], y[i], h[i], length[i], width[i], x[j], y[j], h[j], length[j], width[j]):
                pairs.append((i, j))
    if not pairs:
        return np.empty((0, 2), dtype=np.int64)
    return np.asarray(pairs, dtype=np.int64)


cdef inline void _slab(double o, double d, double half, double* tmin, double* tmax) noexcept nogil:
    cdef double t1, t2
    if fabs(d) < 1e-300:
        if fabs(o) <= half:
            tmin[0] = -INFINITY
            tmax[0] = INFINITY
        else:
            tmin[0] = INFINITY
            tmax[0] = -INFINITY
        return
    t1 = (-half - o) / d
    t2 = (half - o) / d
    if t1 < t2:
        tmin[0] = t1
        tmax[0] = t2
    else:
        tmin[0] = t2
        tmax[0] = t1


def raycast_boxes(double ox, double oy, double heading, int n_rays, double max_dist,
                  const double[::1] x, const double[::1] y, const double[::1] h,
                  const double[::1] length, const double[::1] width, const cnp.uint8_t[::1] mask):
    out = np.full(n_rays, max_dist)
    cdef double[::1] o = out
    cdef Py_ssize_t n = x.shape[0], r, j
    cdef double ang, dxr, dyr, c, s, rx, ry, lox, loy, ldx, ldy
    cdef double t0, t1, u0, u1, lo, hi, best
    with nogil:
        for r in range(n_rays):
            ang = heading + TWO_PI * r / n_rays
            dxr = cos(ang)
            dyr = sin(ang)
            best = INFINITY
            for j in range(n):
                if not mask[j]:
                    continue
                c = cos(h[j])
                s = sin(h[j])
                rx = ox - x[j]
                ry = oy - y[j]
                lox = rx * c + ry * s
                loy = -rx * s + ry * c
                ldx = dxr * c + dyr * s
                ldy = -dxr * s + dyr * c
                _slab(lox, ldx, 0.5 * length[j], &t0, &t1)
                _slab(loy, ldy, 0.5 * width[j], &u0, &u1)
                lo = t0 if t0 > u0 else u0
                hi = t1 if t1 < u1 else u1
                if hi >= (lo if lo > 0.0 else 0.0) and lo <= max_dist:
                    if lo < 0.0:
                        lo = 0.0
                    if lo < best:
                        best = lo
            if best < o[r]:
                o[r] = best
    return out


def raycast_segments(double ox, double oy, double heading, int n_rays, double max_dist, segs):
    cdef double[:, ::1] sg = np.ascontiguousarray(np.asarray(segs, dtype=np.float64).reshape(-1, 4))
    out = np.full(n_rays, max_dist)
    cdef double[::1] o = out
    cdef Py_ssize_t m = sg.shape[0], r, j
    cdef double ang, dxr, dyr, px, py, ex, ey, denom, t, u, best
    with nogil:
        for r in range(n_rays):
            ang = heading + TWO_PI * r / n_rays
            dxr = cos(ang)
            dyr = sin(ang)
            best = INFINITY
            for j in range(m):
                px = sg[j, 0] - ox
                py = sg[j, 1] - oy
                ex = sg[j, 2] - sg[j, 0]
                ey = sg[j, 3] - sg[j, 1]
                denom = dxr * ey - dyr * ex
                if fabs(denom) <= 1e-300:
                    continue
                t = (px * ey - py * ex) / denom
                u = (px * dyr - py * dxr) / denom
                if t >= 0.0 and u >= 0.0 and u <= 1.0 and t < best:
                    best = t
            if best < o[r]:
                o[r] = best
    return out


cdef inline double _idm_accel(double v, double v0, double gap, double dv,
                              const double[::1] params) noexcept nogil:
    cdef double a_max = params[P_AMAX]
    cdef double free, dyn, s_star, g, acc
    if v0 > 0.0:
        free = 1.0 - pow(v / v0, params[P_DELTA])
    else:
        free = -INFINITY
    if gap >= 0.0:
        dyn = v * params[P_T] + v * dv / (2.0 * sqrt(a_max * params[P_B]))
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


def idm_accel(double v, double v0, double gap, double dv, params):
    cdef double[::1] p = np.ascontiguousarray(params, dtype=np.float64)
    return _idm_accel(v, v0, gap, dv, p)


cdef inline Py_ssize_t _locate(const double[::1] ps, Py_ssize_t p0, Py_ssize_t p1, double s) noexcept nogil:
    # largest k with ps[k] <= s, clamped to [p0, p1 - 2]
    cdef Py_ssize_t lo = p0, hi = p1, mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if ps[mid] <= s:
            lo = mid + 1
        else:
            hi = mid
    lo -= 1
    if lo < p0:
        lo = p0
    if lo > p1 - 2:
        lo = p1 - 2
    return lo


cdef inline Py_ssize_t _window_end(const double[::1] ps, Py_ssize_t p0, Py_ssize_t p1, double s) noexcept nogil:
    # first k with ps[k] >= s, clamped to p1 - 1
    cdef Py_ssize_t lo = p0, hi = p1, mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if ps[mid] < s:
            lo = mid + 1
        else:
            hi = mid
    if lo > p1 - 1:
        lo = p1 - 1
    return lo


def locate(const double[::1] ps, Py_ssize_t p0, Py_ssize_t p1, double s):
    return _locate(ps, p0, p1, s)


cdef void _leader_scan(const double[::1] x, const double[::1] y, const double[::1] h,
                       const double[::1] v, const double[::1] length, const double[::1] width,
                       const cnp.uint8_t[::1] alive, const long long[::1] idm,
                       const double[::1] px, const double[::1] py, const double[::1] ps,
                       const long long[::1] p0, const long long[::1] p1,
                       const double[::1] sp, const double[::1] lat, const double[::1] params,
                       long long[::1] leader, double[::1] gap, double[::1] dv) noexcept nogil:
    cdef Py_ssize_t m = idm.shape[0], n = x.shape[0], k, i, j, a0, a1, kk
    cdef double look = params[P_LOOKAHEAD], margin = params[P_MARGIN]
    cdef double reach, ddx, ddy, s_j, d_j, tang, ds, dth, cdt, sdt, lat_ext, lon_ext, g
    cdef double best_g, best_dth
    cdef long long best_j
    for k in range(m):
        i = idm[k]
        leader[k] = -1
        gap[k] = -1.0
        dv[k] = 0.0
        if not alive[i] or p1[k] - p0[k] < 2:
            continue
        a0 = _locate(ps, p0[k], p1[k], sp[k])
        a1 = _window_end(ps, p0[k], p1[k], sp[k] + look + 0.5 * length[i] + 10.0)
        if a1 <= a0:
            a1 = a0 + 1
        best_j = -1
        best_g = INFINITY
        best_dth = 0.0
        for j in range(n):
            if j == i or not alive[j]:
                continue
            reach = look + 0.5 * length[i] + 0.5 * (length[j] + width[j]) + 1.0
            ddx = x[j] - x[i]
            ddy = y[j] - y[i]
            if ddx * ddx + ddy * ddy > reach * reach:
                continue
            _project_one(px, py, ps, a0, a1, x[j], y[j], &s_j, &d_j, &kk)
            tang = atan2(py[kk + 1] - py[kk], px[kk + 1] - px[kk])
            ds = s_j - sp[k]
            if ds <= 0.0:
                continue
            dth = h[j] - tang
            cdt = fabs(cos(dth))
            sdt = fabs(sin(dth))
            lat_ext = 0.5 * length[j] * sdt + 0.5 * width[j] * cdt
            if fabs(d_j - lat[k]) - lat_ext >= 0.5 * width[i] + margin:
                continue
            lon_ext = 0.5 * length[j] * cdt + 0.5 * width[j] * sdt
            g = ds - 0.5 * length[i] - lon_ext
            if g > look:
                continue
            if g < best_g:
                best_g = g
                best_j = j
                best_dth = dth
        if best_j >= 0:
            leader[k] = best_j
            gap[k] = best_g if best_g > 0.0 else 0.0
            dv[k] = v[i] - v[best_j] * cos(best_dth)


def leader_scan(const double[::1] x, const double[::1] y, const double[::1] h,
                const double[::1] v, const double[::1] length, const double[::1] width,
                const cnp.uint8_t[::1] alive, const long long[::1] idm,
                const double[::1] px, const double[::1] py, const double[::1] ps,
                const long long[::1] p0, const long long[::1] p1,
                const double[::1] sp, const double[::1] lat, const double[::1] params,
                long long[::1] leader, double[::1] gap, double[::1] dv):
    with nogil:
        _leader_scan(x, y, h, v, length, width, alive, idm, px, py, ps, p0, p1, sp, lat,
                     params, leader, gap, dv)


cdef inline void _path_pose(const double[::1] px, const double[::1] py, const double[::1] ps,
                            Py_ssize_t p0, Py_ssize_t p1, double s, double lat,
                            double* ox, double* oy, double* oh) noexcept nogil:
    cdef Py_ssize_t k = _locate(ps, p0, p1, s)
    cdef double seg = ps[k + 1] - ps[k]
    cdef double t = (s - ps[k]) / seg if seg > 0.0 else 0.0
    cdef double ex = px[k + 1] - px[k], ey = py[k + 1] - py[k]
    cdef double hd = atan2(ey, ex)
    cdef double cx = px[k] + t * ex, cy = py[k] + t * ey
    if lat != 0.0:
        cx = cx - lat * sin(hd)
        cy = cy + lat * cos(hd)
    ox[0] = cx
    oy[0] = cy
    oh[0] = hd


def path_pose(const double[::1] px, const double[::1] py, const double[::1] ps,
              Py_ssize_t p0, Py_ssize_t p1, double s, double lat):
    cdef double cx, cy, hd
    _path_pose(px, py, ps, p0, p1, s, lat, &cx, &cy, &hd)
    return cx, cy, hd


def idm_step(double[::1] x, double[::1] y, double[::1] h, double[::1] v,
             const double[::1] length, const double[::1] width, cnp.uint8_t[::1] alive,
             const long long[::1] idm, const double[::1] px, const double[::1] py,
             const double[::1] ps, const long long[::1] p0, const long long[::1] p1,
             double[::1] sp, const double[::1] v0, const double[::1] lat,
             const double[::1] params, long long[::1] leader, double[::1] gap, double[::1] dv):
    cdef Py_ssize_t m = idm.shape[0], k, i
    cdef double dt = params[P_DT], vi, a, vn, step, room, end, snew, cx, cy, hd
    acc_arr = np.zeros(m)
    cdef double[::1] acc = acc_arr
    with nogil:
        _leader_scan(x, y, h, v, length, width, alive, idm, px, py, ps, p0, p1, sp, lat,
                     params, leader, gap, dv)
        for k in range(m):
            i = idm[k]
            if alive[i] and p1[k] - p0[k] >= 2:
                acc[k] = _idm_accel(v[i], v0[k], gap[k], dv[k], params)
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
                alive[i] = 0
            sp[k] = snew
            v[i] = vn
            _path_pose(px, py, ps, p0[k], p1[k], snew, lat[k], &cx, &cy, &hd)
            x[i] = cx
            y[i] = cy
            h[i] = hd
