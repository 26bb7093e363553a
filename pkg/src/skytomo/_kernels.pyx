# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled ray-marching and NCC kernels.

Same signatures and semantics as :mod:`skytomo._fallback`.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, exp, ceil, sqrt

cnp.import_array()


cdef inline void _axis(double p, double o, double s, Py_ssize_t n, bint periodic,
                       Py_ssize_t* i0, Py_ssize_t* i1, double* f, bint* inside) noexcept nogil:
    cdef double g = (p - o) / s - 0.5
    cdef double fl
    cdef Py_ssize_t k
    if periodic:
        fl = floor(g)
        f[0] = g - fl
        k = <Py_ssize_t>fl
        k = k % n
        if k < 0:
            k += n
        i0[0] = k
        i1[0] = (k + 1) % n
        inside[0] = True
    else:
        inside[0] = (p >= o) and (p <= o + n * s)
        if g < 0.0:
            g = 0.0
        if g > n - 1.0:
            g = n - 1.0
        k = <Py_ssize_t>floor(g)
        if k > n - 1:
            k = n - 1
        i0[0] = k
        i1[0] = k + 1 if k + 1 < n else n - 1
        f[0] = g - k


cdef inline double _sample(const double[:, :, ::1] grid, double px, double py, double pz,
                           double ox, double oy, double oz, double sx, double sy, double sz,
                           bint periodic) noexcept nogil:
    cdef Py_ssize_t nx = grid.shape[0], ny = grid.shape[1], nz = grid.shape[2]
    cdef Py_ssize_t x0, x1, y0, y1, z0, z1
    cdef double fx, fy, fz
    cdef bint inx, iny, inz
    _axis(pz, oz, sz, nz, False, &z0, &z1, &fz, &inz)
    if not inz:
        return 0.0
    _axis(px, ox, sx, nx, periodic, &x0, &x1, &fx, &inx)
    if not inx:
        return 0.0
    _axis(py, oy, sy, ny, periodic, &y0, &y1, &fy, &iny)
    if not iny:
        return 0.0
    return ((1 - fx) * (1 - fy) * (1 - fz) * grid[x0, y0, z0]
            + fx * (1 - fy) * (1 - fz) * grid[x1, y0, z0]
            + (1 - fx) * fy * (1 - fz) * grid[x0, y1, z0]
            + fx * fy * (1 - fz) * grid[x1, y1, z0]
            + (1 - fx) * (1 - fy) * fz * grid[x0, y0, z1]
            + fx * (1 - fy) * fz * grid[x1, y0, z1]
            + (1 - fx) * fy * fz * grid[x0, y1, z1]
            + fx * fy * fz * grid[x1, y1, z1])


def march_rays(origins, dirs, t0, t1, beta, sun_od, origin, voxel, double step,
               bint periodic, bint with_scatter):
    cdef const double[:, ::1] o = np.ascontiguousarray(origins, dtype=np.float64)
    cdef const double[:, ::1] d = np.ascontiguousarray(dirs, dtype=np.float64)
    cdef const double[::1] ta = np.ascontiguousarray(t0, dtype=np.float64)
    cdef const double[::1] tb = np.ascontiguousarray(t1, dtype=np.float64)
    cdef const double[:, :, ::1] b = np.ascontiguousarray(beta, dtype=np.float64)
    cdef const double[:, :, ::1] so = np.ascontiguousarray(sun_od, dtype=np.float64)
    cdef double ox = origin[0], oy = origin[1], oz = origin[2]
    cdef double sx = voxel[0], sy = voxel[1], sz = voxel[2]
    cdef Py_ssize_t nrays = o.shape[0]
    od_arr = np.zeros(nrays)
    sc_arr = np.zeros(nrays)
    cdef double[::1] od = od_arr
    cdef double[::1] sc = sc_arr
    cdef Py_ssize_t r, k, nsteps
    cdef double length, dt, t, px, py, pz, bp, bn, tsp, tsn, tau, acc, scat
    with nogil:
        for r in range(nrays):
            length = tb[r] - ta[r]
            if length <= 0.0:
                continue
            nsteps = <Py_ssize_t>ceil(length / step)
            dt = length / nsteps
            t = ta[r]
            bp = _sample(b, o[r, 0] + t * d[r, 0], o[r, 1] + t * d[r, 1], o[r, 2] + t * d[r, 2],
                         ox, oy, oz, sx, sy, sz, periodic)
            if with_scatter:
                tsp = exp(-_sample(so, o[r, 0] + t * d[r, 0], o[r, 1] + t * d[r, 1],
                                   o[r, 2] + t * d[r, 2], ox, oy, oz, sx, sy, sz, periodic))
            acc = 0.0
            scat = 0.0
            for k in range(1, nsteps + 1):
                t = ta[r] + k * dt
                px = o[r, 0] + t * d[r, 0]
                py = o[r, 1] + t * d[r, 1]
                pz = o[r, 2] + t * d[r, 2]
                bn = _sample(b, px, py, pz, ox, oy, oz, sx, sy, sz, periodic)
                tau = 0.5 * (bp + bn) * dt
                if with_scatter:
                    tsn = exp(-_sample(so, px, py, pz, ox, oy, oz, sx, sy, sz, periodic))
                    scat += exp(-acc) * (1.0 - exp(-tau)) * 0.5 * (tsp + tsn)
                    tsp = tsn
                acc += tau
                bp = bn
            od[r] = acc
            sc[r] = scat
    return od_arr, sc_arr


def ncc_scores(template, image, Py_ssize_t cx, Py_ssize_t cy, Py_ssize_t radius):
    cdef const double[:, ::1] tpl = np.ascontiguousarray(template, dtype=np.float64)
    cdef const double[:, ::1] img = np.ascontiguousarray(image, dtype=np.float64)
    cdef Py_ssize_t p = tpl.shape[0], half = p // 2, n = 2 * radius + 1
    cdef Py_ssize_t nx = img.shape[0], ny = img.shape[1]
    scores_arr = np.full((n, n), -2.0)
    cdef double[:, ::1] scores = scores_arr
    cdef Py_ssize_t i, j, a, c, wx, wy
    cdef double tmean = 0.0, tn = 0.0, wm, wn, num, v, denom
    tc_arr = np.empty((p, p))
    cdef double[:, ::1] tc = tc_arr
    for a in range(p):
        for c in range(p):
            tmean += tpl[a, c]
    tmean /= p * p
    for a in range(p):
        for c in range(p):
            tc[a, c] = tpl[a, c] - tmean
            tn += tc[a, c] * tc[a, c]
    tn = sqrt(tn)
    with nogil:
        for i in range(n):
            wx = cx - radius + i
            if wx < half or wx > nx - 1 - half:
                continue
            for j in range(n):
                wy = cy - radius + j
                if wy < half or wy > ny - 1 - half:
                    continue
                wm = 0.0
                for a in range(p):
                    for c in range(p):
                        wm += img[wx - half + a, wy - half + c]
                wm /= p * p
                wn = 0.0
                num = 0.0
                for a in range(p):
                    for c in range(p):
                        v = img[wx - half + a, wy - half + c] - wm
                        wn += v * v
                        num += v * tc[a, c]
                denom = sqrt(wn) * tn
                scores[i, j] = num / denom if denom > 1e-12 else 0.0
    return scores_arr
