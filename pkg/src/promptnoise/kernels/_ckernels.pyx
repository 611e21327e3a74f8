# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled correlation and histogram kernels.

Window sums come from integral images, so one offset costs O(H*W) and the full
map O(H*W*rho**2).
"""

import numpy as np

from libc.math cimport sqrt, floor


cdef void _integral(const double[:, ::1] src, double[:, ::1] dst) noexcept nogil:
    # dst has one extra leading row/column of zeros
    cdef Py_ssize_t i, j
    cdef Py_ssize_t h = src.shape[0], w = src.shape[1]
    cdef double row
    for j in range(w + 1):
        dst[0, j] = 0.0
    for i in range(h):
        dst[i + 1, 0] = 0.0
        row = 0.0
        for j in range(w):
            row += src[i, j]
            dst[i + 1, j + 1] = dst[i, j + 1] + row


cdef inline double _box(const double[:, ::1] I, Py_ssize_t i, Py_ssize_t j, Py_ssize_t k) noexcept nogil:
    return I[i + k, j + k] - I[i, j + k] - I[i + k, j] + I[i, j]


def correlation_map(const double[:, ::1] xp, int H, int W, int rho, double var_eps):
    """Local Pearson map on a plane padded by ``rho - 1`` on every side."""
    cdef Py_ssize_t r = rho // 2
    cdef Py_ssize_t nch = rho * rho
    cdef Py_ssize_t PH = xp.shape[0], PW = xp.shape[1]
    cdef Py_ssize_t CH = H + 2 * r, CW = W + 2 * r
    cdef Py_ssize_t i, j, u, v, dy, dx, ch
    cdef double inv_n = 1.0 / nch
    cdef double mean = 0.0
    cdef double sa, sb, ma, mb, va, vb, cov

    for u in range(PH):
        for v in range(PW):
            mean += xp[u, v]
    mean /= PH * PW

    x_arr = np.empty((PH, PW), dtype=np.float64)
    cdef double[:, ::1] x = x_arr
    sq_arr = np.empty((PH, PW), dtype=np.float64)
    cdef double[:, ::1] sq = sq_arr
    for u in range(PH):
        for v in range(PW):
            x[u, v] = xp[u, v] - mean
            sq[u, v] = x[u, v] * x[u, v]

    Ix_arr = np.empty((PH + 1, PW + 1), dtype=np.float64)
    Ixx_arr = np.empty((PH + 1, PW + 1), dtype=np.float64)
    Ip_arr = np.empty((CH + 1, CW + 1), dtype=np.float64)
    prod_arr = np.empty((CH, CW), dtype=np.float64)
    cdef double[:, ::1] Ix = Ix_arr
    cdef double[:, ::1] Ixx = Ixx_arr
    cdef double[:, ::1] Ip = Ip_arr
    cdef double[:, ::1] prod = prod_arr
    _integral(x, Ix)
    _integral(sq, Ixx)

    out = np.zeros((H, W, nch), dtype=np.float64)
    cdef double[:, :, ::1] o = out

    ch = 0
    for dy in range(rho):
        for dx in range(rho):
            if dy == r and dx == r:
                # zero offset: reuse the squared integral so cov == var bitwise
                for i in range(H):
                    for j in range(W):
                        sa = _box(Ix, i + r, j + r, rho) * inv_n
                        va = _box(Ixx, i + r, j + r, rho) * inv_n - sa * sa
                        o[i, j, ch] = 0.0 if va < var_eps else va / sqrt(va * va)
                ch += 1
                continue
            # prod[u, v] = x[r + u, r + v] * x[dy + u, dx + v]
            for u in range(CH):
                for v in range(CW):
                    prod[u, v] = x[r + u, r + v] * x[dy + u, dx + v]
            _integral(prod, Ip)
            for i in range(H):
                for j in range(W):
                    sa = _box(Ix, i + r, j + r, rho) * inv_n
                    sb = _box(Ix, i + dy, j + dx, rho) * inv_n
                    va = _box(Ixx, i + r, j + r, rho) * inv_n - sa * sa
                    vb = _box(Ixx, i + dy, j + dx, rho) * inv_n - sb * sb
                    if va < var_eps or vb < var_eps:
                        o[i, j, ch] = 0.0
                    else:
                        cov = _box(Ip, i, j, rho) * inv_n - sa * sb
                        o[i, j, ch] = cov / sqrt(va * vb)
            ch += 1
    return out


def histogram_counts(const double[::1] values, int bins, double lo, double hi):
    """Equal-width bin counts on ``[lo, hi]``; out-of-range values go to the end bins."""
    counts = np.zeros(bins, dtype=np.int64)
    cdef long long[::1] c = counts
    cdef Py_ssize_t i, n = values.shape[0]
    cdef double scale = bins / (hi - lo)
    cdef double v
    cdef long long idx
    for i in range(n):
        v = (values[i] - lo) * scale
        idx = <long long> floor(v)
        if idx < 0:
            idx = 0
        elif idx >= bins:
            idx = bins - 1
        c[idx] += 1
    return counts
