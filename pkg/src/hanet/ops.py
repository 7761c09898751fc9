"""Differentiable primitives.

Each function computes its forward result with numpy (or the compiled
kernels) and records a closure that maps the output gradient to input
gradients.
"""

from __future__ import annotations

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from hanet import kernels
from hanet.tensor import ShapeError, Tensor, make_result

log = logging.getLogger(__name__)

_ONE_BELOW = np.nextafter(1.0, 0.0)
_TINY = np.nextafter(0.0, 1.0)

_switches = threading.local()


@contextmanager
def record_switches():
    """Collect the branch pattern (ReLU masks, max-pool winners) of every op run inside the block.

    Two forwards with equal patterns lie on the same smooth piece of the
    network, which is what finite-difference checks need.
    """
    prev = getattr(_switches, "log", None)
    _switches.log = patterns = []
    try:
        yield patterns
    finally:
        _switches.log = prev


def _note_switch(pattern: np.ndarray) -> None:
    patterns = getattr(_switches, "log", None)
    if patterns is not None:
        patterns.append(pattern.copy())


def _check_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected a 4-D (N, C, H, W) tensor, got shape {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (N, C_in, H, W) with ``weight`` (C_out, C_in, R, R)."""
    _check_4d(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be (C_out, C_in, R, R), got {weight.shape}")
    c_out, c_in, R, R2 = weight.shape
    N, C, H, W = x.shape
    if C != c_in:
        raise ShapeError(f"conv2d: input has {C} channels but weight expects {c_in} (weight {weight.shape}, input {x.shape})")
    if R != R2 or R % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd side, got {R}x{R2}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: need stride >= 1 and padding >= 0, got stride={stride}, padding={padding}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias must have shape ({c_out},), got {bias.shape}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if Hp < R or Wp < R:
        raise ShapeError(f"conv2d: padded input {Hp}x{Wp} is smaller than kernel {R}x{R}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    xp = np.ascontiguousarray(xp)
    Ho = (Hp - R) // stride + 1
    Wo = (Wp - R) // stride + 1
    cols = kernels.im2col(xp, R, stride)
    wmat = weight.data.reshape(c_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(N, Ho, Wo, c_out).transpose(0, 3, 1, 2))

    def backward_fn(g):
        gf = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        dw = (gf.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        db = gf.sum(axis=0) if bias is not None and bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dxp = kernels.col2im(np.ascontiguousarray(gf @ wmat), xp.shape, R, stride)
            dx = dxp[:, :, padding:padding + H, padding:padding + W]
        return dx, dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result("conv2d", out, inputs, backward_fn)


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    num_features: int
    momentum: float = 0.1
    eps: float = 1e-5
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)
    num_batches: int = 0

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if self.running_mean is None:
            self.running_mean = np.zeros(self.num_features)
        if self.running_var is None:
            self.running_var = np.ones(self.num_features)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalization over (N, H, W).

    Training mode uses batch statistics and updates ``state`` by an
    exponential moving average; eval mode uses the running statistics.
    """
    _check_4d(x, "batchnorm2d")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm2d: gamma/beta must have shape ({C},), got {gamma.shape} and {beta.shape}")
    eps = state.eps
    n = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = state.momentum
        unbiased = var * n / (n - 1) if n > 1 else var
        state.running_mean = (1.0 - m) * state.running_mean + m * mean
        state.running_var = (1.0 - m) * state.running_var + m * unbiased
        state.num_batches += 1
    else:
        if state.num_batches == 0:
            log.warning("batchnorm2d: eval mode before any running-stat update, using mean 0 / var 1")
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward_fn(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            dx = (inv_std[None, :, None, None] / n) * (n * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv_std[None, :, None, None]
        return dx, dgamma, dbeta

    return make_result("batchnorm2d", out, (x, gamma, beta), backward_fn)


def adaptive_avg_pool(x: Tensor, K: int) -> Tensor:
    """Average ``x`` into a K x K grid; window i spans [floor(iH/K), ceil((i+1)H/K))."""
    _check_4d(x, "adaptive_avg_pool")
    H, W = x.shape[2], x.shape[3]
    if not 1 <= K <= min(H, W):
        raise ShapeError(f"adaptive_avg_pool: need 1 <= K <= min(H, W) = {min(H, W)}, got K={K}")
    out = kernels.adaptive_pool_forward(np.ascontiguousarray(x.data), K)

    def backward_fn(g):
        return (kernels.adaptive_pool_backward(np.ascontiguousarray(g), H, W),)

    return make_result("adaptive_avg_pool", out, (x,), backward_fn)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with half-pixel centers and edge clamping."""
    _check_4d(x, "bilinear_resize")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: target size must be >= 1, got {out_h}x{out_w}")
    H, W = x.shape[2], x.shape[3]
    out = kernels.bilinear_forward(np.ascontiguousarray(x.data), out_h, out_w)

    def backward_fn(g):
        return (kernels.bilinear_backward(np.ascontiguousarray(g), H, W),)

    return make_result("bilinear_resize", out, (x,), backward_fn)


def flatten(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C*H*W) in channel-major order."""
    shape = x.shape
    out = x.data.reshape(shape[0], -1)
    return make_result("flatten", out, (x,), lambda g: (g.reshape(shape),))


def unflatten(x: Tensor) -> Tensor:
    """(N, F) -> (N, F, 1, 1)."""
    if x.ndim != 2:
        raise ShapeError(f"unflatten: expected (N, F), got {x.shape}")
    shape = x.shape
    out = x.data.reshape(shape[0], shape[1], 1, 1)
    return make_result("unflatten", out, (x,), lambda g: (g.reshape(shape),))


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map of (N, F) rows by ``weight`` (F_out, F)."""
    if x.ndim != 2:
        raise ShapeError(f"fully_connected: input must be flattened to (N, F), got {x.shape}")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"fully_connected: input has {x.shape[1]} features but weight is {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"fully_connected: bias must have shape ({weight.shape[0]},), got {bias.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward_fn(g):
        dx = g @ weight.data if x.requires_grad else None
        dw = g.T @ x.data if weight.requires_grad else None
        db = g.sum(axis=0) if bias is not None else None
        return dx, dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result("fully_connected", out, inputs, backward_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _note_switch(mask)
    return make_result("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clamped so every output lies strictly inside (0, 1)."""
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    s = np.clip(s, _TINY, _ONE_BELOW)
    return make_result("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``a`` then ``b`` along the channel axis."""
    _check_4d(a, "concat_channels")
    _check_4d(b, "concat_channels")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels: N/H/W must agree, got {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return make_result("concat_channels", out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _check_4d(x, "slice_channels")
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_channels: bad range [{start}, {stop}) for {x.shape[1]} channels")
    shape = x.shape

    def backward_fn(g):
        dx = np.zeros(shape)
        dx[:, start:stop] = g
        return (dx,)

    return make_result("slice_channels", x.data[:, start:stop].copy(), (x,), backward_fn)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    if a.ndim == 0 or b.ndim == 0:
        return a.shape if b.ndim == 0 else b.shape
    if a.ndim != b.ndim:
        raise ShapeError(f"{op}: rank mismatch {a.shape} vs {b.shape}")
    shape = []
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable")
        shape.append(max(da, db))
    return tuple(shape)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if shape == g.shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    axes = tuple(i for i, (dg, ds) in enumerate(zip(g.shape, shape)) if ds == 1 and dg != 1)
    return g.sum(axis=axes, keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_result("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")
    sa, sb = a.shape, b.shape

    def backward_fn(g):
        da = _unbroadcast(g * b.data, sa) if a.requires_grad else None
        db = _unbroadcast(g * a.data, sb) if b.requires_grad else None
        return da, db

    return make_result("mul", a.data * b.data, (a, b), backward_fn)


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties go to the first element."""
    _check_4d(x, "max_pool2d")
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"max_pool2d: spatial dims must be even, got {H}x{W}")
    h, w = H // 2, W // 2
    blocks = x.data.reshape(N, C, h, 2, w, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, h, w, 4)
    idx = blocks.argmax(axis=-1)[..., None]
    _note_switch(idx)
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def backward_fn(g):
        gb = np.zeros((N, C, h, w, 4))
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        return (gb.reshape(N, C, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H, W),)

    return make_result("max_pool2d", out, (x,), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return make_result("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
