"""Dense float64 tensors with a reverse-mode tape.

Every differentiable primitive appends one entry to the active tape when
any of its inputs tracks gradients. ``backward`` replays the tape in exact
reverse order. Tapes are thread-local; a model and its tape belong to one
thread during forward/backward.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class Tensor:
    """A float64 array, optionally tracking gradients.

    Activations are 4-D ``(N, C, H, W)``. Parameters may be lower rank
    (bias vectors, FC matrices) and the loss is 0-D.
    """

    __slots__ = ("data", "grad", "requires_grad", "_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.ndim > 4:
            raise ShapeError(f"tensors are at most 4-D, got shape {arr.shape}")
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"all dimensions must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._leaf = True

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # Internal constructor: no copy, marks the result as non-leaf.
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t._leaf = not requires_grad
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._leaf

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; the functions live in hanet.ops
    def __add__(self, other):
        from hanet import ops
        return ops.add(self, _as_tensor(other))

    def __mul__(self, other):
        from hanet import ops
        return ops.mul(self, _as_tensor(other))

    def sum(self):
        from hanet import ops
        return ops.sum_all(self)


class Parameter(Tensor):
    """A learnable leaf tensor with a dotted name path inside its model."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeEntry:
    op: str
    inputs: tuple
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence]
    saved: dict = field(default_factory=dict)


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __len__(self):
        return len(self.entries)

    def record(self, op, inputs, output, backward_fn, **saved):
        self.entries.append(TapeEntry(op, tuple(inputs), output, backward_fn, saved))

    def clear(self) -> None:
        self.entries.clear()

    def backward(self, loss: Tensor) -> list[str]:
        """Propagate d(loss)/d(input) back through the tape.

        Gradients accumulate into ``.grad`` of every leaf that requires
        grad. Returns the op names in the order they were visited.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ValueError("loss does not depend on any tensor that requires grad")
        seed = np.ones_like(loss.data)
        if loss.is_leaf:
            _accumulate(loss, seed)
            return []
        grads = {id(loss): seed}
        visited = []
        for entry in reversed(self.entries):
            g = grads.pop(id(entry.output), None)
            if g is None:
                continue
            visited.append(entry.op)
            in_grads = entry.backward_fn(g)
            for t, gi in zip(entry.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.is_leaf:
                    _accumulate(t, gi)
                else:
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
        return visited


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


_state = threading.local()


def active_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = Tape()
    return tape


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable recording inside the block."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def fresh_tape():
    """Record into a new tape for the duration of the block."""
    prev = active_tape()
    tape = _state.tape = Tape()
    try:
        yield tape
    finally:
        _state.tape = prev


def backward(loss: Tensor) -> None:
    active_tape().backward(loss)


def make_result(op: str, arr: np.ndarray, inputs: Sequence[Tensor], backward_fn, **saved) -> Tensor:
    """Wrap ``arr`` as an op output and record it if any input tracks grad."""
    track = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, track)
    if track:
        active_tape().record(op, inputs, out, backward_fn, **saved)
    return out
