"""Backbone -> hybrid attention cascade -> backend density regressor.

The backbone is a VGG-style stack of Conv-BN-ReLU stages with 2x2 max
pooling after the first three stages only, so feature maps are exactly
1/8 of the input resolution. The backend halves the width three times
with 3x3 Conv-BN-ReLU blocks and ends in a 1x1 conv to one channel.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from hanet import ops
from hanet.attention import AttentionCascade, AttentionOptions, CascadeConfig, ham_forward
from hanet.nn import DEFAULT_INIT_STD, Conv2d, ConvBNReLU, Module
from hanet.tensor import ShapeError, Tensor

STRIDE = 8
FULL_PLAN = ((2, 64), (2, 128), (3, 256), (3, 512))
TOY_PLAN = ((1, 16), (1, 32), (1, 48), (1, 64))

CHECKPOINT_MAGIC = b"HANETCKP"
CHECKPOINT_VERSION = 1
_CKPT_PREAMBLE = struct.Struct("<8sIIQ")


@dataclass(frozen=True)
class BackboneConfig:
    plan: tuple = TOY_PLAN

    def __post_init__(self):
        plan = tuple((int(n), int(w)) for n, w in self.plan)
        object.__setattr__(self, "plan", plan)
        if len(plan) != 4:
            raise ValueError(f"backbone plan needs 4 stages (pools after the first three), got {len(plan)}")
        if any(n < 1 or w < 1 for n, w in plan):
            raise ValueError(f"every stage needs >= 1 conv of width >= 1, got {plan}")
        if plan[-1][1] % 2:
            raise ValueError(f"final stage width must be even, got {plan[-1][1]}")

    @property
    def out_channels(self) -> int:
        return self.plan[-1][1]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture switches. Empty ``scales`` bypasses the cascade."""

    plan: tuple = TOY_PLAN
    scales: tuple = (1, 2, 3, 6)
    use_backend: bool = True
    init_std: float = DEFAULT_INIT_STD
    reduction: int = 16
    branch_bn: bool = True
    share_g3: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "plan", BackboneConfig(self.plan).plan)
        object.__setattr__(self, "scales", tuple(int(k) for k in self.scales))
        if any(k < 1 for k in self.scales):
            raise ValueError(f"scales must be >= 1, got {self.scales}")
        if self.use_backend and self.plan[-1][1] % 8:
            raise ValueError(f"backend halves the width three times; final width {self.plan[-1][1]} is not divisible by 8")

    @property
    def backbone(self) -> BackboneConfig:
        return BackboneConfig(self.plan)

    @property
    def attention(self) -> AttentionOptions:
        return AttentionOptions(self.reduction, self.branch_bn, self.share_g3, self.init_std, self.bn_momentum, self.bn_eps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["plan"] = [list(s) for s in self.plan]
        d["scales"] = list(self.scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "plan": tuple(tuple(s) for s in d["plan"]), "scales": tuple(d["scales"])})


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, std=DEFAULT_INIT_STD, bn_momentum=0.1, bn_eps=1e-5):
        self.cfg = cfg
        self.stages = []
        c_in = 3
        for n, width in cfg.plan:
            stage = Stage([ConvBNReLU(c_in if i == 0 else width, width, 3, rng, std, bn_momentum, bn_eps) for i in range(n)])
            self.stages.append(stage)
            c_in = width

    def forward(self, image: Tensor) -> Tensor:
        return backbone_forward(image, self)


class Stage(Module):
    def __init__(self, blocks):
        self.blocks = blocks

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x


def backbone_forward(image: Tensor, backbone: Backbone) -> Tensor:
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"backbone expects (N, 3, H, W) images, got {image.shape}")
    H, W = image.shape[2], image.shape[3]
    if H % STRIDE or W % STRIDE:
        raise ShapeError(f"image size {H}x{W} is not divisible by {STRIDE}; pad it to a multiple of {STRIDE} first")
    x = image
    for i, stage in enumerate(backbone.stages):
        x = stage(x)
        if i < 3:
            x = ops.max_pool2d(x)
    return x


class Backend(Module):
    def __init__(self, c_in: int, rng: np.random.Generator, std=DEFAULT_INIT_STD, bn_momentum=0.1, bn_eps=1e-5):
        widths = [c_in, c_in // 2, c_in // 4, c_in // 8]
        self.blocks = [ConvBNReLU(a, b, 3, rng, std, bn_momentum, bn_eps) for a, b in zip(widths, widths[1:])]
        self.out = Conv2d(widths[-1], 1, 1, rng, std)

    @property
    def in_channels(self) -> int:
        return self.blocks[0].conv.weight.shape[1]

    def forward(self, features: Tensor) -> Tensor:
        return backend_forward(features, self)


def backend_forward(features: Tensor, backend: Backend) -> Tensor:
    if features.ndim != 4 or features.shape[1] != backend.in_channels:
        raise ShapeError(f"backend expects {backend.in_channels} input channels, got shape {features.shape}")
    x = features
    for b in backend.blocks:
        x = b(x)
    return backend.out(x)


class HANet(Module):
    """The full density regressor; ``forward`` maps (N,3,H,W) to (N,1,H/8,W/8)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        c = cfg.plan[-1][1]
        self.backbone = Backbone(cfg.backbone, rng, cfg.init_std, cfg.bn_momentum, cfg.bn_eps)
        if cfg.scales:
            self.ham = AttentionCascade(CascadeConfig(c, cfg.scales), rng, cfg.attention).hams
        if cfg.use_backend:
            self.backend = Backend(c, rng, cfg.init_std, cfg.bn_momentum, cfg.bn_eps)
        else:
            self.head = Conv2d(c, 1, 1, rng, cfg.init_std)
        self.assign_names()

    def forward(self, image: Tensor, maps: list | None = None) -> Tensor:
        return hanet_forward(image, self, maps)


def hanet_forward(image: Tensor, model: HANet, maps: list | None = None) -> Tensor:
    x = backbone_forward(image, model.backbone)
    for ham in getattr(model, "ham", []):
        x = ham_forward(x, ham, maps)
    if model.cfg.use_backend:
        return backend_forward(x, model.backend)
    return model.head(x)


def count_from_map(dmap, clamp: bool = False) -> np.ndarray:
    """Per-image sum of an (N, 1, h, w) map."""
    arr = dmap.data if isinstance(dmap, Tensor) else np.asarray(dmap, dtype=np.float64)
    if clamp:
        arr = np.clip(arr, 0.0, None)
    return arr.reshape(arr.shape[0], -1).sum(axis=1)


@dataclass
class ModelCheckpoint:
    config: dict
    params: dict
    buffers: dict
    iteration: int = 0
    rng_state: dict | None = None
    format_version: int = CHECKPOINT_VERSION
    extra: dict = field(default_factory=dict)


def capture(model: HANet, config: dict, iteration: int = 0, rng_state=None) -> ModelCheckpoint:
    params = {n: p.data.copy() for n, p in model.named_parameters()}
    buffers = {
        n: {"running_mean": s.running_mean.copy(), "running_var": s.running_var.copy(), "num_batches": s.num_batches}
        for n, s in model.named_buffers()
    }
    return ModelCheckpoint(config, params, buffers, iteration, rng_state)


def restore(model: HANet, ckpt: ModelCheckpoint, strict: bool = True) -> list[str]:
    """Copy checkpoint tensors into ``model``; returns names that were loaded."""
    loaded = []
    params = dict(model.named_parameters())
    for name, arr in ckpt.params.items():
        if name not in params:
            if strict:
                raise KeyError(f"checkpoint parameter {name!r} not in model")
            continue
        if params[name].shape != arr.shape:
            raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {params[name].shape}")
        params[name].data = arr.copy()
        loaded.append(name)
    if strict and set(params) - set(ckpt.params):
        raise KeyError(f"model parameters missing from checkpoint: {sorted(set(params) - set(ckpt.params))[:5]}")
    states = dict(model.named_buffers())
    for name, buf in ckpt.buffers.items():
        if name not in states:
            if strict:
                raise KeyError(f"checkpoint buffer {name!r} not in model")
            continue
        st = states[name]
        st.running_mean = buf["running_mean"].copy()
        st.running_var = buf["running_var"].copy()
        st.num_batches = int(buf["num_batches"])
        loaded.append(name)
    return loaded


def save_checkpoint(path, ckpt: ModelCheckpoint) -> None:
    """JSON header with a name -> offset/shape table, then raw little-endian float64."""
    entries, blobs, offset = [], [], 0

    def add(name, kind, arr):
        nonlocal offset
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.size

    for name, arr in ckpt.params.items():
        add(name, "param", arr)
    batches = {}
    for name, buf in ckpt.buffers.items():
        add(name, "running_mean", buf["running_mean"])
        add(name, "running_var", buf["running_var"])
        batches[name] = int(buf["num_batches"])
    header = {
        "format_version": ckpt.format_version,
        "config": ckpt.config,
        "iteration": ckpt.iteration,
        "rng_state": ckpt.rng_state,
        "bn_batches": batches,
        "entries": entries,
        "extra": ckpt.extra,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, 0, len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> ModelCheckpoint:
    raw = Path(path).read_bytes()
    magic, version, _, hlen = _CKPT_PREAMBLE.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = _CKPT_PREAMBLE.size
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    payload = np.frombuffer(raw[start + hlen:], dtype="<f8")
    params, buffers = {}, {}
    for e in header["entries"]:
        arr = payload[e["offset"]:e["offset"] + e["count"]].astype(np.float64).reshape(e["shape"])
        if e["kind"] == "param":
            params[e["name"]] = arr
        else:
            buffers.setdefault(e["name"], {})[e["kind"]] = arr
    for name, n in header["bn_batches"].items():
        buffers[name]["num_batches"] = n
    return ModelCheckpoint(
        header["config"], params, buffers, header["iteration"], header["rng_state"], header["format_version"], header.get("extra", {})
    )


def import_weights(model: HANet, path) -> list[str]:
    """Load whatever parameters in ``path`` match ``model`` by name (e.g. a pretrained backbone)."""
    return restore(model, load_checkpoint(path), strict=False)
