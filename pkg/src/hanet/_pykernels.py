"""Pure numpy versions of the compiled inner loops.

Every function here has the same signature and semantics as its twin in
``_ckernels.pyx``. Results agree to rounding; summation order differs.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, R, stride):
    N, C, Hp, Wp = xp.shape
    win = sliding_window_view(xp, (R, R), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(N * Ho * Wo, C * R * R)


def col2im(cols, shape, R, stride):
    N, C, Hp, Wp = shape
    Ho = (Hp - R) // stride + 1
    Wo = (Wp - R) // stride + 1
    blocks = cols.reshape(N, Ho, Wo, C, R, R).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros(shape, dtype=np.float64)
    for u in range(R):
        for v in range(R):
            out[:, :, u:u + stride * Ho:stride, v:v + stride * Wo:stride] += blocks[:, :, u, v]
    return out


def _windows(n, K):
    return [((i * n) // K, ((i + 1) * n + K - 1) // K) for i in range(K)]


def adaptive_pool_forward(x, K):
    N, C, H, W = x.shape
    out = np.empty((N, C, K, K), dtype=np.float64)
    for i, (r0, r1) in enumerate(_windows(H, K)):
        for j, (s0, s1) in enumerate(_windows(W, K)):
            out[:, :, i, j] = x[:, :, r0:r1, s0:s1].sum(axis=(2, 3)) / ((r1 - r0) * (s1 - s0))
    return out


def adaptive_pool_backward(g, H, W):
    N, C, K, _ = g.shape
    out = np.zeros((N, C, H, W), dtype=np.float64)
    for i, (r0, r1) in enumerate(_windows(H, K)):
        for j, (s0, s1) in enumerate(_windows(W, K)):
            out[:, :, r0:r1, s0:s1] += (g[:, :, i, j] / ((r1 - r0) * (s1 - s0)))[:, :, None, None]
    return out


def interp_matrix(n_in, n_out):
    """(n_out, n_in) matrix of half-pixel bilinear weights along one axis."""
    A = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for dst in range(n_out):
        src = max((dst + 0.5) * scale - 0.5, 0.0)
        lo = min(int(np.floor(src)), n_in - 1)
        hi = lo + 1 if lo < n_in - 1 else lo
        # past the last pixel both taps coincide; weight 1.0 keeps the value exact
        lam = src - lo if hi != lo else 0.0
        A[dst, lo] += 1.0 - lam
        A[dst, hi] += lam
    return A


def bilinear_forward(x, out_h, out_w):
    Ah = interp_matrix(x.shape[2], out_h)
    Aw = interp_matrix(x.shape[3], out_w)
    return np.ascontiguousarray(Ah @ x @ Aw.T)


def bilinear_backward(g, in_h, in_w):
    Ah = interp_matrix(in_h, g.shape[2])
    Aw = interp_matrix(in_w, g.shape[3])
    return np.ascontiguousarray(Ah.T @ g @ Aw)


def stamp_gaussians(grid, rows, cols, sigmas, windows):
    H, W = grid.shape
    for r, c, s, w in zip(rows, cols, sigmas, windows):
        half = int(w) // 2
        r_lo, r_hi = max(r - half, 0), min(r + half, H - 1)
        c_lo, c_hi = max(c - half, 0), min(c + half, W - 1)
        inv = 1.0 / (2.0 * s * s)
        dr = np.arange(r_lo, r_hi + 1) - r
        dc = np.arange(c_lo, c_hi + 1) - c
        gr = np.exp(-(dr * dr) * inv)
        gc = np.exp(-(dc * dc) * inv)
        gr = gr / gr.sum()
        gc = gc / gc.sum()
        grid[r_lo:r_hi + 1, c_lo:c_hi + 1] += gr[:, None] * gc[None, :]
