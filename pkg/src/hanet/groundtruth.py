"""Density maps from head annotations.

Each head stamps a discrete Gaussian, truncated at the image border and
renormalized so it still sums to one. The map total therefore equals the
head count. ``downsample_sum`` pools to the network's stride-8 grid by
summing blocks, which keeps that total.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from hanet import kernels

log = logging.getLogger(__name__)

DMAP_MAGIC = b"DMAP"
_DMAP_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class KernelRecipe:
    """How heads are blurred: ``fixed`` (window/sigma) or geometry-``adaptive``."""

    mode: str = "fixed"
    window: int = 15
    sigma: float = 4.0
    beta: float = 0.3
    k_neighbors: int = 3

    def __post_init__(self):
        if self.mode not in ("fixed", "adaptive"):
            raise ValueError(f"kernel mode must be 'fixed' or 'adaptive', got {self.mode!r}")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"window must be a positive odd integer, got {self.window}")
        if self.sigma <= 0 or self.beta <= 0:
            raise ValueError("sigma and beta must be > 0")
        if self.k_neighbors < 1:
            raise ValueError(f"k_neighbors must be >= 1, got {self.k_neighbors}")

    def as_fixed(self) -> "KernelRecipe":
        return KernelRecipe("fixed", self.window, self.sigma, self.beta, self.k_neighbors)


@dataclass
class DensityMap:
    grid: np.ndarray
    recipe: KernelRecipe | None = None
    meta: dict = field(default_factory=dict)

    @property
    def count(self) -> float:
        return math.fsum(self.grid.ravel())

    @property
    def shape(self):
        return self.grid.shape


def as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return np.zeros((0, 2))
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"points must be an (n, 2) array of (x, y), got shape {pts.shape}")
    return pts


def check_bounds(points, H: int, W: int) -> np.ndarray:
    """Return points as an (n, 2) array, rejecting any outside [0, W) x [0, H)."""
    pts = as_points(points)
    bad = ~((pts[:, 0] >= 0) & (pts[:, 0] < W) & (pts[:, 1] >= 0) & (pts[:, 1] < H))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"point {i} at (x={pts[i, 0]}, y={pts[i, 1]}) lies outside the {W}x{H} image")
    return pts


def pixel_centers(pts: np.ndarray, H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    rows = np.clip(np.floor(pts[:, 1] + 0.5), 0, H - 1).astype(np.int64)
    cols = np.clip(np.floor(pts[:, 0] + 0.5), 0, W - 1).astype(np.int64)
    return rows, cols


def _stamp(pts, H, W, sigmas, windows) -> np.ndarray:
    grid = np.zeros((H, W), dtype=np.float64)
    if len(pts):
        rows, cols = pixel_centers(pts, H, W)
        kernels.stamp_gaussians(
            grid,
            rows,
            cols,
            np.ascontiguousarray(sigmas, dtype=np.float64),
            np.ascontiguousarray(windows, dtype=np.int64),
        )
    return grid


def render_fixed(points, H: int, W: int, recipe: KernelRecipe = KernelRecipe()) -> DensityMap:
    if recipe.mode != "fixed":
        raise ValueError("render_fixed needs a fixed-mode recipe")
    pts = check_bounds(points, H, W)
    n = len(pts)
    grid = _stamp(pts, H, W, np.full(n, recipe.sigma), np.full(n, recipe.window))
    return DensityMap(grid, recipe)


def adaptive_sigmas(pts: np.ndarray, beta: float, k: int) -> np.ndarray:
    """beta times the mean distance from each point to its k nearest other points."""
    k_eff = min(k, len(pts) - 1)
    dist, _ = cKDTree(pts).query(pts, k=k_eff + 1)
    return beta * dist[:, 1:].mean(axis=1)


def odd_window(sigma: float) -> int:
    w = math.ceil(6.0 * sigma + 1.0)
    return w if w % 2 else w + 1


def render_adaptive(points, H: int, W: int, recipe: KernelRecipe = KernelRecipe(mode="adaptive")) -> DensityMap:
    if recipe.mode != "adaptive":
        raise ValueError("render_adaptive needs an adaptive-mode recipe")
    pts = check_bounds(points, H, W)
    if len(pts) < 2:
        if len(pts) == 1:
            log.info("adaptive kernel needs >= 2 points; falling back to fixed recipe")
        dm = render_fixed(pts, H, W, recipe.as_fixed())
        dm.meta["fallback"] = "fixed"
        return DensityMap(dm.grid, recipe, dm.meta)
    sigmas = adaptive_sigmas(pts, recipe.beta, recipe.k_neighbors)
    degenerate = sigmas <= 0
    if degenerate.any():
        log.info("%d coincident points get the fixed sigma", int(degenerate.sum()))
        sigmas = np.where(degenerate, recipe.sigma, sigmas)
    windows = np.array([odd_window(s) for s in sigmas], dtype=np.int64)
    windows[degenerate] = recipe.window
    grid = _stamp(pts, H, W, sigmas, windows)
    return DensityMap(grid, recipe, {"sigmas": sigmas})


def render(points, H: int, W: int, recipe: KernelRecipe = KernelRecipe()) -> DensityMap:
    if recipe.mode == "fixed":
        return render_fixed(points, H, W, recipe)
    return render_adaptive(points, H, W, recipe)


def downsample_sum(dmap, factor: int = 8):
    """Sum non-overlapping factor x factor blocks.

    Accepts a DensityMap or a 2-D array and returns the same kind. Blocks
    are accumulated in row-major order within each block.
    """
    grid = dmap.grid if isinstance(dmap, DensityMap) else np.asarray(dmap, dtype=np.float64)
    H, W = grid.shape
    if H % factor or W % factor:
        raise ValueError(f"map size {H}x{W} is not divisible by {factor}")
    out = np.zeros((H // factor, W // factor))
    for dr in range(factor):
        for dc in range(factor):
            out += grid[dr::factor, dc::factor]
    if isinstance(dmap, DensityMap):
        return DensityMap(out, dmap.recipe, {**dmap.meta, "downsample": factor})
    return out


def write_dmap(path, grid: np.ndarray) -> None:
    grid = np.asarray(grid, dtype="<f8")
    if grid.ndim != 2:
        raise ValueError(f"DMAP stores a 2-D grid, got shape {grid.shape}")
    H, W = grid.shape
    with open(path, "wb") as fh:
        fh.write(_DMAP_HEADER.pack(DMAP_MAGIC, H, W, 0))
        fh.write(np.ascontiguousarray(grid).tobytes())


def read_dmap(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _DMAP_HEADER.size:
        raise ValueError(f"{path}: truncated DMAP header")
    magic, H, W, _ = _DMAP_HEADER.unpack_from(raw)
    if magic != DMAP_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    body = raw[_DMAP_HEADER.size:]
    if len(body) != 8 * H * W:
        raise ValueError(f"{path}: expected {8 * H * W} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f8").reshape(H, W).astype(np.float64)


def write_pgm(path, grid: np.ndarray) -> None:
    """8-bit binary PGM preview, negatives clamped to 0 and scaled to the max."""
    g = np.clip(np.asarray(grid, dtype=np.float64), 0.0, None)
    top = g.max() if g.size else 0.0
    img = np.zeros(g.shape, dtype=np.uint8) if top <= 0 else np.round(g / top * 255.0).astype(np.uint8)
    H, W = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
