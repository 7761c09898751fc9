# cython: language_level=3
"""Compiled inner loops. Signatures mirror ``hanet._pykernels`` exactly."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, floor

cnp.import_array()


def im2col(double[:, :, :, ::1] xp, Py_ssize_t R, Py_ssize_t stride):
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1], Hp = xp.shape[2], Wp = xp.shape[3]
    cdef Py_ssize_t Ho = (Hp - R) // stride + 1
    cdef Py_ssize_t Wo = (Wp - R) // stride + 1
    out = np.empty((N * Ho * Wo, C * R * R), dtype=np.float64)
    cdef double[:, ::1] cols = out
    cdef Py_ssize_t n, i, j, c, u, v, row, col
    with nogil:
        for n in range(N):
            for i in range(Ho):
                for j in range(Wo):
                    row = (n * Ho + i) * Wo + j
                    col = 0
                    for c in range(C):
                        for u in range(R):
                            for v in range(R):
                                cols[row, col] = xp[n, c, i * stride + u, j * stride + v]
                                col += 1
    return out


def col2im(double[:, ::1] cols, tuple shape, Py_ssize_t R, Py_ssize_t stride):
    cdef Py_ssize_t N = shape[0], C = shape[1], Hp = shape[2], Wp = shape[3]
    cdef Py_ssize_t Ho = (Hp - R) // stride + 1
    cdef Py_ssize_t Wo = (Wp - R) // stride + 1
    out = np.zeros((N, C, Hp, Wp), dtype=np.float64)
    cdef double[:, :, :, ::1] xp = out
    cdef Py_ssize_t n, i, j, c, u, v, row, col
    with nogil:
        for n in range(N):
            for i in range(Ho):
                for j in range(Wo):
                    row = (n * Ho + i) * Wo + j
                    col = 0
                    for c in range(C):
                        for u in range(R):
                            for v in range(R):
                                xp[n, c, i * stride + u, j * stride + v] += cols[row, col]
                                col += 1
    return out


def adaptive_pool_forward(double[:, :, :, ::1] x, Py_ssize_t K):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    out = np.empty((N, C, K, K), dtype=np.float64)
    cdef double[:, :, :, ::1] y = out
    cdef Py_ssize_t n, c, i, j, r, s, r0, r1, s0, s1
    cdef double acc
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(K):
                    r0 = (i * H) // K
                    r1 = ((i + 1) * H + K - 1) // K
                    for j in range(K):
                        s0 = (j * W) // K
                        s1 = ((j + 1) * W + K - 1) // K
                        acc = 0.0
                        for r in range(r0, r1):
                            for s in range(s0, s1):
                                acc += x[n, c, r, s]
                        y[n, c, i, j] = acc / ((r1 - r0) * (s1 - s0))
    return out


def adaptive_pool_backward(double[:, :, :, ::1] g, Py_ssize_t H, Py_ssize_t W):
    cdef Py_ssize_t N = g.shape[0], C = g.shape[1], K = g.shape[2]
    out = np.zeros((N, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t n, c, i, j, r, s, r0, r1, s0, s1
    cdef double share
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(K):
                    r0 = (i * H) // K
                    r1 = ((i + 1) * H + K - 1) // K
                    for j in range(K):
                        s0 = (j * W) // K
                        s1 = ((j + 1) * W + K - 1) // K
                        share = g[n, c, i, j] / ((r1 - r0) * (s1 - s0))
                        for r in range(r0, r1):
                            for s in range(s0, s1):
                                dx[n, c, r, s] += share
    return out


cdef inline void _source_coord(Py_ssize_t dst, Py_ssize_t n_in, Py_ssize_t n_out,
                               Py_ssize_t* i0, Py_ssize_t* i1, double* lam) noexcept nogil:
    cdef double scale = <double>n_in / <double>n_out
    cdef double src = (dst + 0.5) * scale - 0.5
    if src < 0.0:
        src = 0.0
    cdef Py_ssize_t lo = <Py_ssize_t>floor(src)
    if lo > n_in - 1:
        lo = n_in - 1
    i0[0] = lo
    i1[0] = lo + 1 if lo < n_in - 1 else lo
    lam[0] = src - lo if i1[0] != lo else 0.0


def bilinear_forward(double[:, :, :, ::1] x, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    out = np.empty((N, C, out_h, out_w), dtype=np.float64)
    cdef double[:, :, :, ::1] y = out
    cdef Py_ssize_t n, c, i, j, r0, r1, s0, s1
    cdef double a, b
    with nogil:
        for i in range(out_h):
            _source_coord(i, H, out_h, &r0, &r1, &a)
            for j in range(out_w):
                _source_coord(j, W, out_w, &s0, &s1, &b)
                for n in range(N):
                    for c in range(C):
                        y[n, c, i, j] = (
                            (1.0 - a) * ((1.0 - b) * x[n, c, r0, s0] + b * x[n, c, r0, s1])
                            + a * ((1.0 - b) * x[n, c, r1, s0] + b * x[n, c, r1, s1])
                        )
    return out


def bilinear_backward(double[:, :, :, ::1] g, Py_ssize_t in_h, Py_ssize_t in_w):
    cdef Py_ssize_t N = g.shape[0], C = g.shape[1], out_h = g.shape[2], out_w = g.shape[3]
    out = np.zeros((N, C, in_h, in_w), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t n, c, i, j, r0, r1, s0, s1
    cdef double a, b, v
    with nogil:
        for i in range(out_h):
            _source_coord(i, in_h, out_h, &r0, &r1, &a)
            for j in range(out_w):
                _source_coord(j, in_w, out_w, &s0, &s1, &b)
                for n in range(N):
                    for c in range(C):
                        v = g[n, c, i, j]
                        dx[n, c, r0, s0] += (1.0 - a) * (1.0 - b) * v
                        dx[n, c, r0, s1] += (1.0 - a) * b * v
                        dx[n, c, r1, s0] += a * (1.0 - b) * v
                        dx[n, c, r1, s1] += a * b * v
    return out


def stamp_gaussians(double[:, ::1] grid, long[::1] rows, long[::1] cols,
                    double[::1] sigmas, long[::1] windows):
    """Add one truncated, renormalized Gaussian per point into ``grid`` in place."""
    cdef Py_ssize_t H = grid.shape[0], W = grid.shape[1]
    cdef Py_ssize_t p, half, r_lo, r_hi, c_lo, c_hi, r, c, wmax = 1
    cdef double s, sr, sc, inv
    for p in range(windows.shape[0]):
        if windows[p] > wmax:
            wmax = windows[p]
    gr_buf = np.empty(wmax, dtype=np.float64)
    gc_buf = np.empty(wmax, dtype=np.float64)
    cdef double[::1] gr = gr_buf
    cdef double[::1] gc = gc_buf
    with nogil:
        for p in range(rows.shape[0]):
            half = windows[p] // 2
            s = sigmas[p]
            inv = 1.0 / (2.0 * s * s)
            r_lo = rows[p] - half if rows[p] - half > 0 else 0
            r_hi = rows[p] + half if rows[p] + half < H - 1 else H - 1
            c_lo = cols[p] - half if cols[p] - half > 0 else 0
            c_hi = cols[p] + half if cols[p] + half < W - 1 else W - 1
            sr = 0.0
            for r in range(r_lo, r_hi + 1):
                gr[r - r_lo] = exp(-((r - rows[p]) * (r - rows[p])) * inv)
                sr += gr[r - r_lo]
            sc = 0.0
            for c in range(c_lo, c_hi + 1):
                gc[c - c_lo] = exp(-((c - cols[p]) * (c - cols[p])) * inv)
                sc += gc[c - c_lo]
            for r in range(r_lo, r_hi + 1):
                gr[r - r_lo] = gr[r - r_lo] / sr
            for c in range(c_lo, c_hi + 1):
                gc[c - c_lo] = gc[c - c_lo] / sc
            for r in range(r_lo, r_hi + 1):
                for c in range(c_lo, c_hi + 1):
                    grid[r, c] += gr[r - r_lo] * gc[c - c_lo]
