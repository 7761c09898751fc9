"""Parameter containers: a tiny module system over ``hanet.ops``."""

from __future__ import annotations

import numpy as np

from hanet import ops
from hanet.ops import BatchNormState
from hanet.tensor import Parameter, Tensor

DEFAULT_INIT_STD = 0.01


class Module:
    """Base class that discovers parameters and submodules by attribute order."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover
        raise NotImplementedError

    def _children(self):
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
        for key, child in self._children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        """Yield (name, BatchNormState) for every normalization layer."""
        for key, val in vars(self).items():
            if isinstance(val, BatchNormState):
                yield prefix + key, val
        for key, child in self._children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def assign_names(self) -> None:
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise ValueError(f"duplicate parameter name {name!r}")
            seen.add(name)
            p.name = name

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def gaussian(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, std: float = DEFAULT_INIT_STD):
        self.weight = Parameter(gaussian(rng, (c_out, c_in, k, k), std))
        self.bias = Parameter(np.zeros(c_out))
        self.padding = k // 2

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5):
        self.weight = Parameter(np.ones(c))
        self.bias = Parameter(np.zeros(c))
        self.state = BatchNormState(c, momentum=momentum, eps=eps)

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm2d(x, self.weight, self.bias, self.state, self.training)


class Linear(Module):
    def __init__(self, f_in: int, f_out: int, rng: np.random.Generator, std: float = DEFAULT_INIT_STD):
        self.weight = Parameter(gaussian(rng, (f_out, f_in), std))
        self.bias = Parameter(np.zeros(f_out))

    def forward(self, x: Tensor) -> Tensor:
        return ops.fully_connected(x, self.weight, self.bias)


class ConvBNReLU(Module):
    """Conv -> BN -> ReLU, the block used throughout the network."""

    def __init__(self, c_in, c_out, k, rng, std=DEFAULT_INIT_STD, bn_momentum=0.1, bn_eps=1e-5):
        self.conv = Conv2d(c_in, c_out, k, rng, std)
        self.bn = BatchNorm2d(c_out, bn_momentum, bn_eps)

    def forward(self, x):
        return ops.relu(self.bn(self.conv(x)))
