"""Spatial, channel and hybrid attention with embedded scale-context.

A hybrid attention module (HAM) at scale K runs a spatial branch and a
channel branch in parallel, each emitting C/2 channels, and concatenates
them so the module maps (N, C, H, W) to (N, C, H, W). A cascade folds
HAMs left to right over a list of scales, global (K=1) first by default.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hanet import ops
from hanet.nn import DEFAULT_INIT_STD, BatchNorm2d, Conv2d, Linear, Module
from hanet.tensor import ShapeError, Tensor

DEFAULT_SCALES = (1, 2, 3, 6)


@dataclass(frozen=True)
class AttentionOptions:
    reduction: int = 16
    branch_bn: bool = True
    share_g3: bool = True
    init_std: float = DEFAULT_INIT_STD
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.reduction < 1:
            raise ValueError(f"reduction ratio must be >= 1, got {self.reduction}")


@dataclass(frozen=True)
class CascadeConfig:
    channels: int
    scales: tuple = DEFAULT_SCALES

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(k) for k in self.scales))
        if not self.scales:
            raise ValueError("a cascade needs at least one scale")
        if any(k < 1 for k in self.scales):
            raise ValueError(f"every scale must be >= 1, got {self.scales}")
        if self.channels % 2:
            raise ValueError(f"channel width must be even, got {self.channels}")


def _check_input(x: Tensor, K: int, where: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{where}: expected (N, C, H, W), got {x.shape}")
    if x.shape[1] % 2:
        raise ShapeError(f"{where}: channel count must be even, got {x.shape[1]}")
    if K > min(x.shape[2], x.shape[3]):
        raise ShapeError(f"{where}: scale K={K} exceeds spatial size {x.shape[2]}x{x.shape[3]}")


class SpatialAttention(Module):
    """Parameters of the spatial branch: a 3x3 conv C -> C/2 and a 1x1 conv C/2 -> 1."""

    def __init__(self, channels: int, rng: np.random.Generator, opts: AttentionOptions = AttentionOptions()):
        half = channels // 2
        self.g3 = Conv2d(channels, half, 3, rng, opts.init_std)
        if opts.branch_bn:
            self.bn = BatchNorm2d(half, opts.bn_momentum, opts.bn_eps)
        if not opts.share_g3:
            self.g3_ctx = Conv2d(channels, half, 3, rng, opts.init_std)
        self.g1 = Conv2d(half, 1, 1, rng, opts.init_std)

    def features(self, x: Tensor) -> Tensor:
        f = self.g3(x)
        if hasattr(self, "bn"):
            f = ops.relu(self.bn(f))
        return f

    def project_context(self, ctx: Tensor) -> Tensor:
        conv = getattr(self, "g3_ctx", self.g3)
        return conv(ctx)

    def forward(self, x: Tensor, K: int) -> Tensor:
        return sam_forward(x, self, K)


class ChannelAttention(Module):
    """Parameters of the channel branch: a 3x3 conv and the FC-ReLU-FC bottleneck."""

    def __init__(self, channels: int, K: int, rng: np.random.Generator, opts: AttentionOptions = AttentionOptions()):
        half = channels // 2
        flat = K * K * channels
        hidden = max(1, flat // opts.reduction)
        self.g3 = Conv2d(channels, half, 3, rng, opts.init_std)
        if opts.branch_bn:
            self.bn = BatchNorm2d(half, opts.bn_momentum, opts.bn_eps)
        self.fc1 = Linear(flat, hidden, rng, opts.init_std)
        self.fc2 = Linear(hidden, half, rng, opts.init_std)

    def features(self, x: Tensor) -> Tensor:
        f = self.g3(x)
        if hasattr(self, "bn"):
            f = ops.relu(self.bn(f))
        return f

    def forward(self, x: Tensor, K: int) -> Tensor:
        return cam_forward(x, self, K)


def spatial_map(x: Tensor, p: SpatialAttention, K: int, f: Tensor | None = None) -> Tensor:
    """The (N, 1, H, W) gate of the spatial branch."""
    _check_input(x, K, "sam_forward")
    H, W = x.shape[2], x.shape[3]
    if f is None:
        f = p.features(x)
    ctx = ops.bilinear_resize(ops.adaptive_avg_pool(x, K), H, W)
    return ops.sigmoid(p.g1(ops.add(f, p.project_context(ctx))))


def sam_forward(x: Tensor, p: SpatialAttention, K: int, maps: list | None = None) -> Tensor:
    """Spatial attention: G3(x) gated by sigmoid(G1(G3(x) + G3(U(A_K(x)))))."""
    _check_input(x, K, "sam_forward")
    f = p.features(x)
    gate = spatial_map(x, p, K, f)
    if maps is not None:
        maps.append(gate.data)
    return ops.mul(f, gate)


def channel_weights(x: Tensor, p: ChannelAttention, K: int) -> Tensor:
    """The (N, C/2, 1, 1) gate of the channel branch."""
    _check_input(x, K, "cam_forward")
    expected = p.fc1.weight.shape[1]
    if K * K * x.shape[1] != expected:
        raise ShapeError(f"cam_forward: flattened context has {K * K * x.shape[1]} features, fc1 expects {expected}")
    v = ops.flatten(ops.adaptive_avg_pool(x, K))
    w = ops.sigmoid(p.fc2(ops.relu(p.fc1(v))))
    return ops.unflatten(w)


def cam_forward(x: Tensor, p: ChannelAttention, K: int, maps: list | None = None) -> Tensor:
    """Channel attention: G3(x) scaled per channel by sigmoid(FC(flatten(A_K(x))))."""
    _check_input(x, K, "cam_forward")
    f = p.features(x)
    w = channel_weights(x, p, K)
    if maps is not None:
        maps.append(w.data)
    return ops.mul(f, w)


class HybridAttention(Module):
    """One HAM: spatial and channel branches at a single scale K."""

    def __init__(self, channels: int, K: int, rng: np.random.Generator, opts: AttentionOptions = AttentionOptions()):
        if channels % 2:
            raise ValueError(f"channel width must be even, got {channels}")
        if K < 1:
            raise ValueError(f"scale must be >= 1, got {K}")
        self.K = K
        self.sam = SpatialAttention(channels, rng, opts)
        self.cam = ChannelAttention(channels, K, rng, opts)

    def forward(self, x: Tensor, maps: list | None = None) -> Tensor:
        return ham_forward(x, self, maps)


def ham_forward(x: Tensor, p: HybridAttention, maps: list | None = None) -> Tensor:
    return ops.concat_channels(sam_forward(x, p.sam, p.K, maps), cam_forward(x, p.cam, p.K, maps))


class AttentionCascade(Module):
    def __init__(self, cfg: CascadeConfig, rng: np.random.Generator, opts: AttentionOptions = AttentionOptions()):
        self.cfg = cfg
        self.hams = [HybridAttention(cfg.channels, K, rng, opts) for K in cfg.scales]

    def forward(self, x: Tensor, maps: list | None = None) -> Tensor:
        return cascade_forward(x, self.cfg, self.hams, maps)


def cascade_forward(x0: Tensor, cfg: CascadeConfig, params: list, maps: list | None = None) -> Tensor:
    """Apply one HAM per scale in order; returns the last module's output."""
    if len(params) != len(cfg.scales):
        raise ValueError(f"cascade has {len(cfg.scales)} scales but {len(params)} modules")
    if x0.shape[1] != cfg.channels:
        raise ShapeError(f"cascade expects {cfg.channels} channels, got {x0.shape[1]}")
    x = x0
    for K, ham in zip(cfg.scales, params):
        if ham.K != K:
            raise ValueError(f"module built for K={ham.K} placed at scale {K}")
        x = ham_forward(x, ham, maps)
    return x
