"""Central finite-difference checks against the tape's gradients.

Central differences only estimate a derivative when the loss is smooth
on [p - h, p + h]. ReLU and max pooling are piecewise smooth, so each
probe also compares the branch pattern at p - h and p + h with the one
at p; a sample whose probes switch a branch straddles a kink and is
flagged (and, in :func:`check`, replaced by a fresh draw).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hanet.ops import record_switches
from hanet.tensor import fresh_tape, no_grad

STEP = 1e-5
REL_FLOOR = 1e-5


@dataclass
class GradSample:
    name: str
    index: tuple
    analytic: float
    numeric: float
    kink: bool = False

    @property
    def rel_error(self) -> float:
        return relative_error(self.analytic, self.numeric)


def relative_error(a: float, n: float, floor: float = REL_FLOOR) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from dividing by noise."""
    return abs(a - n) / max(abs(a), abs(n), floor)


def _evaluate(loss_fn):
    with no_grad(), record_switches() as patterns:
        value = loss_fn().item()
    return value, patterns


def _same_branch(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def probe(loss_fn, tensor, index, h: float = STEP, base: list | None = None) -> tuple[float, bool]:
    """(central difference, kink crossed) for one tensor entry."""
    if base is None:
        base = _evaluate(loss_fn)[1]
    arr = tensor.data
    orig = arr[index]
    try:
        arr[index] = orig + h
        up, p_up = _evaluate(loss_fn)
        arr[index] = orig - h
        down, p_down = _evaluate(loss_fn)
    finally:
        arr[index] = orig
    return (up - down) / (2.0 * h), not (_same_branch(p_up, base) and _same_branch(p_down, base))


def numeric_grad(loss_fn, tensor, index, h: float = STEP) -> float:
    return probe(loss_fn, tensor, index, h)[0]


def analytic_grads(loss_fn, tensors) -> list:
    for t in tensors:
        t.grad = None
    with fresh_tape():
        loss_fn().backward()
    return [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]


def check(loss_fn, named_tensors, n_samples: int, rng: np.random.Generator, h: float = STEP,
          max_draws: int | None = None) -> list[GradSample]:
    """Compare autodiff and central differences at ``n_samples`` smooth random entries.

    Entries are drawn by picking a tensor uniformly, then an element in
    it. Draws that straddle a kink are kept in the result with
    ``kink=True`` and another entry is drawn, up to ``max_draws`` in total.
    """
    names = [n for n, _ in named_tensors]
    tensors = [t for _, t in named_tensors]
    grads = analytic_grads(loss_fn, tensors)
    base = _evaluate(loss_fn)[1]
    max_draws = max_draws or 10 * n_samples
    out, smooth = [], 0
    while smooth < n_samples and len(out) < max_draws:
        k = int(rng.integers(len(tensors)))
        t = tensors[k]
        idx = tuple(int(rng.integers(d)) for d in t.shape)
        num, kink = probe(loss_fn, t, idx, h, base)
        out.append(GradSample(names[k], idx, float(grads[k][idx]), num, kink))
        smooth += not kink
    return out


def check_all(loss_fn, named_tensors, h: float = STEP) -> list[GradSample]:
    """Exhaustive version of :func:`check` for small tensors; kinks are flagged, not replaced."""
    tensors = [t for _, t in named_tensors]
    grads = analytic_grads(loss_fn, tensors)
    base = _evaluate(loss_fn)[1]
    out = []
    for (name, t), g in zip(named_tensors, grads):
        for idx in np.ndindex(*t.shape):
            num, kink = probe(loss_fn, t, idx, h, base)
            out.append(GradSample(name, idx, float(g[idx]), num, kink))
    return out


def summarize(samples) -> dict:
    """Worst relative error over smooth samples plus sample counts."""
    smooth = [s for s in samples if not s.kink]
    return {
        "max_rel_error": max((s.rel_error for s in smooth), default=float("nan")),
        "smooth": len(smooth),
        "kinks": len(samples) - len(smooth),
    }
