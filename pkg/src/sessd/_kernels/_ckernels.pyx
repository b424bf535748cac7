# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled geometry kernels; mirrors _pykernels operation for operation."""

import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, hypot, INFINITY

cnp.import_array()

cdef enum:
    MAXV = 32
cdef double COLLINEAR_EPS = 1e-12
cdef double AREA_EPS = 1e-12


cdef inline void _corners(const double[:] b, double* xs, double* ys) noexcept nogil:
    cdef double c = cos(b[6]), s = sin(b[6])
    cdef double hl = 0.5 * b[4], hw = 0.5 * b[3]
    cdef double du[4]
    cdef double dv[4]
    du[0] = hl; dv[0] = hw
    du[1] = -hl; dv[1] = hw
    du[2] = -hl; dv[2] = -hw
    du[3] = hl; dv[3] = -hw
    cdef int i
    for i in range(4):
        xs[i] = b[0] + du[i] * c - dv[i] * s
        ys[i] = b[1] + du[i] * s + dv[i] * c


cdef double _bev_inter(const double[:] a, const double[:] b) noexcept nogil:
    cdef double ra = 0.5 * hypot(a[3], a[4])
    cdef double rb = 0.5 * hypot(b[3], b[4])
    if hypot(a[0] - b[0], a[1] - b[1]) > ra + rb:
        return 0.0
    cdef double cx[4]
    cdef double cy[4]
    cdef double bufx[2][MAXV]
    cdef double bufy[2][MAXV]
    cdef int n = 4, m, i, j, cur = 0, nxt
    cdef double ax, ay, ex, ey, sx, sy, px, py, s_side, p_side, t
    cdef bint p_in, s_in
    _corners(a, bufx[0], bufy[0])
    _corners(b, cx, cy)
    for i in range(4):
        if n == 0:
            return 0.0
        ax = cx[i]; ay = cy[i]
        ex = cx[(i + 1) % 4] - ax
        ey = cy[(i + 1) % 4] - ay
        nxt = 1 - cur
        m = 0
        sx = bufx[cur][n - 1]; sy = bufy[cur][n - 1]
        s_side = ex * (sy - ay) - ey * (sx - ax)
        for j in range(n):
            px = bufx[cur][j]; py = bufy[cur][j]
            p_side = ex * (py - ay) - ey * (px - ax)
            p_in = p_side >= -COLLINEAR_EPS
            s_in = s_side >= -COLLINEAR_EPS
            if p_in:
                if not s_in:
                    t = s_side / (s_side - p_side)
                    bufx[nxt][m] = sx + t * (px - sx); bufy[nxt][m] = sy + t * (py - sy)
                    m += 1
                bufx[nxt][m] = px; bufy[nxt][m] = py
                m += 1
            elif s_in:
                t = s_side / (s_side - p_side)
                bufx[nxt][m] = sx + t * (px - sx); bufy[nxt][m] = sy + t * (py - sy)
                m += 1
            sx = px; sy = py; s_side = p_side
        n = m
        cur = nxt
    if n < 3:
        return 0.0
    cdef double acc = 0.0
    for i in range(n):
        j = (i + 1) % n
        acc += bufx[cur][i] * bufy[cur][j] - bufx[cur][j] * bufy[cur][i]
    acc = 0.5 * acc
    return acc if acc > AREA_EPS else 0.0


cdef inline bint _same(const double[:] a, const double[:] b) noexcept nogil:
    cdef int k
    for k in range(7):
        if a[k] != b[k]:
            return False
    return True


cdef double _iou_bev(const double[:] a, const double[:] b) noexcept nogil:
    if _same(a, b):
        return 1.0
    cdef double inter = _bev_inter(a, b)
    if inter <= 0.0:
        return 0.0
    cdef double u = a[3] * a[4] + b[3] * b[4] - inter
    cdef double v = inter / u
    return v if v < 1.0 else 1.0


cdef double _iou_3d(const double[:] a, const double[:] b) noexcept nogil:
    if _same(a, b):
        return 1.0
    cdef double zlo = max(a[2] - 0.5 * a[5], b[2] - 0.5 * b[5])
    cdef double zhi = min(a[2] + 0.5 * a[5], b[2] + 0.5 * b[5])
    if zhi <= zlo:
        return 0.0
    cdef double ib = _bev_inter(a, b)
    if ib <= 0.0:
        return 0.0
    cdef double inter = ib * (zhi - zlo)
    cdef double u = a[3] * a[4] * a[5] + b[3] * b[4] * b[5] - inter
    cdef double v = inter / u
    return v if v < 1.0 else 1.0


def _as_boxes(x):
    return np.ascontiguousarray(x, dtype=np.float64).reshape(-1, 7)


def iou_bev_matrix(a, b):
    cdef const double[:, :] A = _as_boxes(a)
    cdef const double[:, :] B = _as_boxes(b)
    out = np.zeros((A.shape[0], B.shape[0]))
    cdef double[:, :] O = out
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(A.shape[0]):
            for j in range(B.shape[0]):
                O[i, j] = _iou_bev(A[i], B[j])
    return out


def iou_3d_matrix(a, b):
    cdef const double[:, :] A = _as_boxes(a)
    cdef const double[:, :] B = _as_boxes(b)
    out = np.zeros((A.shape[0], B.shape[0]))
    cdef double[:, :] O = out
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(A.shape[0]):
            for j in range(B.shape[0]):
                O[i, j] = _iou_3d(A[i], B[j])
    return out


def iou_bev_pairs(a, b):
    cdef const double[:, :] A = _as_boxes(a)
    cdef const double[:, :] B = _as_boxes(b)
    if A.shape[0] != B.shape[0]:
        raise ValueError("pairwise IoU needs equally many boxes on both sides")
    out = np.zeros(A.shape[0])
    cdef double[:] O = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(A.shape[0]):
            O[i] = _iou_bev(A[i], B[i])
    return out


def iou_3d_pairs(a, b):
    cdef const double[:, :] A = _as_boxes(a)
    cdef const double[:, :] B = _as_boxes(b)
    if A.shape[0] != B.shape[0]:
        raise ValueError("pairwise IoU needs equally many boxes on both sides")
    out = np.zeros(A.shape[0])
    cdef double[:] O = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(A.shape[0]):
            O[i] = _iou_3d(A[i], B[i])
    return out


def farthest_point_sampling(points, Py_ssize_t k, Py_ssize_t start):
    cdef const double[:, :] P = np.ascontiguousarray(points, dtype=np.float64)
    cdef Py_ssize_t n = P.shape[0], i, it, last = start, best_i
    cdef double best, d, dx, dy, dz
    mind_arr = np.full(n, INFINITY)
    out = np.empty(k, dtype=np.int64)
    cdef double[:] mind = mind_arr
    cdef cnp.int64_t[:] O = out
    O[0] = start
    mind[start] = -1.0
    with nogil:
        for it in range(1, k):
            best = -1.0
            best_i = -1
            for i in range(n):
                if mind[i] < 0.0:
                    continue
                dx = P[i, 0] - P[last, 0]
                dy = P[i, 1] - P[last, 1]
                dz = P[i, 2] - P[last, 2]
                d = dx * dx + dy * dy + dz * dz
                if d < mind[i]:
                    mind[i] = d
                if mind[i] > best:
                    best = mind[i]
                    best_i = i
            mind[best_i] = -1.0
            O[it] = best_i
            last = best_i
    return out
