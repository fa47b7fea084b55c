# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the reprojection z-buffer and k-means assignment.

Semantics mirror ``_kernels_py`` exactly; see that module for the contract.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, sqrt, INFINITY

cnp.import_array()


cdef inline bint _key_less(long t1, double z1, double r1, double g1, double b1,
                           long t2, double z2, double r2, double g2, double b2) nogil:
    if t1 != t2:
        return t1 < t2
    if z1 != z2:
        return z1 < z2
    if r1 != r2:
        return r1 < r2
    if g1 != g2:
        return g1 < g2
    return b1 < b2


def splat_zbuffer(u, v, z, rgb, int width, int height, int splat_px):
    cdef const double[:] uu = np.ascontiguousarray(u, dtype=np.float64)
    cdef const double[:] vv = np.ascontiguousarray(v, dtype=np.float64)
    cdef const double[:] zz = np.ascontiguousarray(z, dtype=np.float64)
    cdef const double[:, :] cc = np.ascontiguousarray(rgb, dtype=np.float64).reshape(-1, 3)
    image_arr = np.zeros((height, width, 3), dtype=np.float64)
    covered_arr = np.zeros((height, width), dtype=np.bool_)
    tier_arr = np.full((height, width), 2, dtype=np.int64)
    zbuf_arr = np.zeros((height, width), dtype=np.float64)
    cdef double[:, :, :] image = image_arr
    cdef long[:, :] tiers = tier_arr
    cdef double[:, :] zbuf = zbuf_arr
    cdef Py_ssize_t n = uu.shape[0]
    cdef Py_ssize_t i
    cdef long nu, nv, su, sv, pu, pv, t, back = (splat_px - 1) // 2
    cdef int a, b
    cdef double r, g, bl

    with nogil:
        for i in range(n):
            nu = <long>floor(uu[i] + 0.5)
            nv = <long>floor(vv[i] + 0.5)
            su = nu - back
            sv = nv - back
            if splat_px % 2 == 0:
                if uu[i] < nu:
                    su -= 1
                if vv[i] < nv:
                    sv -= 1
            r = cc[i, 0]
            g = cc[i, 1]
            bl = cc[i, 2]
            for b in range(splat_px):
                pv = sv + b
                if pv < 0 or pv >= height:
                    continue
                for a in range(splat_px):
                    pu = su + a
                    if pu < 0 or pu >= width:
                        continue
                    t = 0 if (pu == nu and pv == nv) else 1
                    if tiers[pv, pu] == 2 or _key_less(
                            t, zz[i], r, g, bl,
                            tiers[pv, pu], zbuf[pv, pu],
                            image[pv, pu, 0], image[pv, pu, 1], image[pv, pu, 2]):
                        tiers[pv, pu] = t
                        zbuf[pv, pu] = zz[i]
                        image[pv, pu, 0] = r
                        image[pv, pu, 1] = g
                        image[pv, pu, 2] = bl
    covered_arr[:, :] = tier_arr < 2
    return image_arr, covered_arr


def kmeans_assign(points, centers):
    cdef const double[:, :] x = np.ascontiguousarray(points, dtype=np.float64)
    cdef const double[:, :] c = np.ascontiguousarray(centers, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], k = c.shape[0], dim = x.shape[1]
    labels_arr = np.zeros(n, dtype=np.int64)
    best_arr = np.zeros(n, dtype=np.float64)
    cdef long[:] labels = labels_arr
    cdef double[:] best = best_arr
    cdef Py_ssize_t i, j, d
    cdef double acc, diff, bval
    cdef long bidx
    with nogil:
        for i in range(n):
            bidx = -1
            bval = 0.0
            for j in range(k):
                acc = 0.0
                for d in range(dim):
                    diff = x[i, d] - c[j, d]
                    acc = acc + diff * diff
                if bidx < 0 or acc < bval:
                    bidx = j
                    bval = acc
            labels[i] = bidx
            best[i] = bval
    return labels_arr, best_arr


def polyline_distance(poly, pts):
    cdef const double[:, :] pl = np.ascontiguousarray(poly, dtype=np.float64)
    cdef const double[:, :] p = np.ascontiguousarray(pts, dtype=np.float64).reshape(-1, 2)
    cdef Py_ssize_t n = p.shape[0], m = pl.shape[0]
    out_arr = np.zeros(n, dtype=np.float64)
    cdef double[:] out = out_arr
    cdef Py_ssize_t i, j
    cdef double ax, ay, abx, aby, den, t, dx, dy, d2, best
    if m < 2:
        for i in range(n):
            dx = p[i, 0] - pl[0, 0]
            dy = p[i, 1] - pl[0, 1]
            out[i] = sqrt(dx * dx + dy * dy)
        return out_arr
    with nogil:
        for i in range(n):
            best = INFINITY
            for j in range(m - 1):
                ax = pl[j, 0]
                ay = pl[j, 1]
                abx = pl[j + 1, 0] - ax
                aby = pl[j + 1, 1] - ay
                den = abx * abx + aby * aby
                if not den > 1e-18:
                    den = 1e-18
                t = ((p[i, 0] - ax) * abx + (p[i, 1] - ay) * aby) / den
                if t < 0.0:
                    t = 0.0
                if t > 1.0:
                    t = 1.0
                dx = p[i, 0] - (ax + t * abx)
                dy = p[i, 1] - (ay + t * aby)
                d2 = dx * dx + dy * dy
                if d2 < best:
                    best = d2
            out[i] = sqrt(best)
    return out_arr
