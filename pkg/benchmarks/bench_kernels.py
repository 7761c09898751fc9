"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints per-kernel best-of-N times for each importable backend, then one
training step (forward + backward) of the toy model under each backend.
"""

import argparse
import timeit

import numpy as np

from hanet import kernels
from hanet.model import HANet, ModelConfig
from hanet.tensor import Tensor, fresh_tape
from hanet.train import mse_loss

FUNCS = ("im2col", "col2im", "adaptive_pool_forward", "adaptive_pool_backward",
         "bilinear_forward", "bilinear_backward", "stamp_gaussians")


def kernel_cases(rng):
    x = rng.normal(size=(4, 64, 16, 16))
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = rng.normal(size=(4 * 16 * 16, 64 * 9))
    pooled = rng.normal(size=(4, 64, 6, 6))
    pts = rng.integers(0, 256, size=(2, 200))
    return {
        "im2col 4x64x16x16 R3": lambda k: k.im2col(xp, 3, 1),
        "col2im 4x64x16x16 R3": lambda k: k.col2im(cols, xp.shape, 3, 1),
        "adaptive pool K=6": lambda k: k.adaptive_pool_forward(x, 6),
        "adaptive pool bwd K=6": lambda k: k.adaptive_pool_backward(pooled, 16, 16),
        "bilinear 6->16": lambda k: k.bilinear_forward(pooled, 16, 16),
        "bilinear bwd 16->6": lambda k: k.bilinear_backward(x, 6, 6),
        "stamp 200 heads 256x256": lambda k: k.stamp_gaussians(
            np.zeros((256, 256)), pts[0].copy(), pts[1].copy(), np.full(200, 4.0), np.full(200, 15, dtype=np.int64)),
    }


def train_step(model, x, gt):
    with fresh_tape():
        mse_loss(model(x), gt).backward()
    model.zero_grad()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    found = kernels.backends()
    names = sorted(found)
    cases = kernel_cases(rng)

    print(f"{'kernel':<28}" + "".join(f"{n:>12}" for n in names) + ("   speedup" if len(names) > 1 else ""))
    for label, fn in cases.items():
        times = {n: min(timeit.repeat(lambda: fn(found[n]), number=3, repeat=args.repeat)) / 3 for n in names}
        row = f"{label:<28}" + "".join(f"{times[n] * 1e3:>10.3f}ms" for n in names)
        if len(names) > 1:
            row += f"{times['python'] / times['cython']:>9.1f}x"
        print(row)

    model = HANet(ModelConfig(scales=(1, 2, 3, 6)), rng)
    x = Tensor(rng.normal(size=(4, 3, 64, 64)))
    gt = Tensor(rng.uniform(0, 0.1, size=(4, 1, 8, 8)))
    original = {f: getattr(kernels, f) for f in FUNCS}
    step = {}
    try:
        for n in names:
            for f in FUNCS:
                setattr(kernels, f, getattr(found[n], f))
            step[n] = min(timeit.repeat(lambda: train_step(model, x, gt), number=1, repeat=args.repeat))
    finally:
        for f, v in original.items():
            setattr(kernels, f, v)
    row = f"{'train step toy 4x3x64x64':<28}" + "".join(f"{step[n] * 1e3:>10.1f}ms" for n in names)
    if len(names) > 1:
        row += f"{step['python'] / step['cython']:>9.1f}x"
    print(row)


if __name__ == "__main__":
    main()
