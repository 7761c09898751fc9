"""Datasets, patch sampling, augmentation and synthetic crowds.

A manifest is JSON::

    {"records": [{"image": "img_000.png", "points": "img_000.json"}, ...],
     "policy": {"M": 4, "m": 128}}

Paths are relative to the manifest's directory. Each points file is a JSON
array of ``[x, y]`` pairs in pixel coordinates (x = column, y = row).
"""

from __future__ import annotations

import json
import logging
import queue
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from hanet.groundtruth import KernelRecipe, check_bounds, downsample_sum, render
from hanet.tensor import Tensor

log = logging.getLogger(__name__)

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])
LUMA = np.array([0.299, 0.587, 0.114])


class DataError(ValueError):
    """A manifest, record or annotation failed validation."""


@dataclass(frozen=True)
class AugmentPolicy:
    M: int = 4
    m: int = 128
    gray_prob: float = 0.2
    hflip_prob: float = 0.5

    def __post_init__(self):
        if not (0.0 <= self.gray_prob <= 1.0 and 0.0 <= self.hflip_prob <= 1.0):
            raise ValueError("augmentation probabilities must lie in [0, 1]")
        if self.M < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        if self.m < 8 or self.m % 8:
            raise ValueError(f"patch side m must be a positive multiple of 8, got {self.m}")


@dataclass
class AnnotatedImage:
    pixels: np.ndarray
    points: np.ndarray
    id: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DataError(f"{self.id}: pixels must be H x W x 3, got {self.pixels.shape}")
        try:
            self.points = check_bounds(self.points, *self.pixels.shape[:2])
        except ValueError as exc:
            raise DataError(f"{self.id}: {exc}") from None

    @property
    def count(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class ManifestRecord:
    image: Path
    points: Path
    id: str


@dataclass
class DatasetManifest:
    root: Path
    records: list
    policy: AugmentPolicy = AugmentPolicy()
    split: str = "train"

    def __len__(self):
        return len(self.records)

    def load(self, i: int) -> AnnotatedImage:
        return load_record(self.records[i])

    def images(self) -> list:
        return [load_record(r) for r in self.records]


def read_points(path) -> np.ndarray:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed annotation JSON ({exc})") from None
    if not isinstance(data, list) or any(not isinstance(p, list) or len(p) != 2 for p in data):
        raise DataError(f"{path}: annotations must be a JSON array of [x, y] pairs")
    return np.asarray(data, dtype=np.float64).reshape(-1, 2)


def load_record(rec: ManifestRecord) -> AnnotatedImage:
    with Image.open(rec.image) as im:
        pixels = np.asarray(im.convert("RGB"))
    return AnnotatedImage(pixels, read_points(rec.points), rec.id)


def load_manifest(path, split: str = "train") -> DatasetManifest:
    """Parse and validate a manifest; every record is checked for files and point bounds."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"manifest {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed manifest JSON ({exc})") from None
    root = path.parent
    pol = doc.get("policy", {})
    policy = AugmentPolicy(**{k: pol[k] for k in ("M", "m", "gray_prob", "hflip_prob") if k in pol})
    records = []
    for i, entry in enumerate(doc.get("records", [])):
        img = root / entry["image"]
        pts = root / entry["points"]
        rid = entry.get("id", Path(entry["image"]).stem)
        for f in (img, pts):
            if not f.exists():
                raise DataError(f"record {rid!r}: missing file {f}")
        points = read_points(pts)
        with Image.open(img) as im:
            W, H = im.size
        try:
            check_bounds(points, H, W)
        except ValueError as exc:
            raise DataError(f"record {rid!r}: {exc}") from None
        records.append(ManifestRecord(img, pts, rid))
    return DatasetManifest(root, records, policy, split)


def read_manifest_entries(path):
    """Yield (id, image path, points path) without validating the files."""
    path = Path(path)
    doc = json.loads(path.read_text())
    for entry in doc.get("records", []):
        yield entry.get("id", Path(entry["image"]).stem), path.parent / entry["image"], path.parent / entry["points"]


def write_manifest(path, records: list, policy: AugmentPolicy) -> None:
    doc = {
        "records": [{"image": r["image"], "points": r["points"]} for r in records],
        "policy": {"M": policy.M, "m": policy.m, "gray_prob": policy.gray_prob, "hflip_prob": policy.hflip_prob},
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


@dataclass
class Patch:
    pixels: np.ndarray
    points: np.ndarray
    origin: tuple
    source: str = ""
    flags: dict = field(default_factory=dict)


def sample_patches(img: AnnotatedImage, policy: AugmentPolicy, rng: np.random.Generator) -> list:
    """Crop ``policy.M`` m x m patches with pairwise-distinct top-left corners.

    A head belongs to a patch iff its point lies inside it. Images smaller
    than m are zero-padded and yield a single patch.
    """
    m = policy.m
    H, W = img.pixels.shape[:2]
    if H < m or W < m:
        log.warning("%s: image %dx%d smaller than patch %d, zero-padding", img.id, W, H, m)
        padded = np.zeros((max(H, m), max(W, m), 3), dtype=np.uint8)
        padded[:H, :W] = img.pixels
        return [_crop(AnnotatedImage(padded, img.points, img.id), 0, 0, m)]
    ny, nx = H - m + 1, W - m + 1
    if ny * nx < policy.M:
        log.warning("%s: only %d distinct origins for %d patches, repeats allowed", img.id, ny * nx, policy.M)
        flat = rng.integers(0, ny * nx, size=policy.M)
    else:
        chosen = []
        seen = set()
        while len(chosen) < policy.M:
            k = int(rng.integers(0, ny * nx))
            if k not in seen:
                seen.add(k)
                chosen.append(k)
        flat = np.array(chosen)
    return [_crop(img, int(k % nx), int(k // nx), m) for k in flat]


def _crop(img: AnnotatedImage, ox: int, oy: int, m: int) -> Patch:
    pts = img.points
    inside = (pts[:, 0] >= ox) & (pts[:, 0] < ox + m) & (pts[:, 1] >= oy) & (pts[:, 1] < oy + m)
    local = pts[inside] - np.array([ox, oy], dtype=np.float64)
    return Patch(img.pixels[oy:oy + m, ox:ox + m].copy(), local, (ox, oy), img.id)


def to_gray(pixels: np.ndarray) -> np.ndarray:
    luma = np.clip(np.round(pixels.astype(np.float64) @ LUMA), 0, 255).astype(np.uint8)
    return np.repeat(luma[..., None], 3, axis=2)


def hflip(pixels: np.ndarray, points: np.ndarray) -> tuple:
    w = pixels.shape[1]
    pts = points.copy()
    # x in (w-1, w) would land below 0; clamping keeps it on the same mirrored pixel
    pts[:, 0] = np.maximum((w - 1) - pts[:, 0], 0.0)
    return pixels[:, ::-1].copy(), pts


def augment(pixels: np.ndarray, points: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator):
    """Random grayscale then random horizontal flip. Returns (pixels, points, flags)."""
    u_gray, u_flip = rng.random(2)
    flags = {"gray": bool(u_gray < policy.gray_prob), "hflip": bool(u_flip < policy.hflip_prob)}
    if flags["gray"]:
        pixels = to_gray(pixels)
    if flags["hflip"]:
        pixels, points = hflip(pixels, points)
    return pixels, points, flags


def normalize(pixels: np.ndarray) -> np.ndarray:
    """H x W x 3 uint8 -> 3 x H x W float, ImageNet mean/std."""
    x = pixels.astype(np.float64) / 255.0
    return ((x - IMAGENET_MEAN) / IMAGENET_STD).transpose(2, 0, 1)


@dataclass
class PatchBatch:
    images: Tensor
    gt_maps: Tensor
    provenance: list

    @property
    def counts(self) -> np.ndarray:
        return np.array([p["count"] for p in self.provenance], dtype=np.float64)


class BatchStream:
    """Endless, seed-deterministic stream of PatchBatch values.

    Each epoch visits every image once in shuffled order and draws M
    augmented patches from it; patches are packed into batches of
    ``batch_size``, carrying leftovers into the next epoch.
    """

    def __init__(self, images, policy: AugmentPolicy, recipe: KernelRecipe, batch_size: int,
                 rng: np.random.Generator, aug_rng: np.random.Generator | None = None, stride: int = 8):
        if not images:
            raise DataError("cannot stream batches from an empty dataset")
        self.images = images
        self.policy = policy
        self.recipe = recipe
        self.batch_size = batch_size
        self.rng = rng
        self.aug_rng = aug_rng if aug_rng is not None else rng
        self.stride = stride
        self.epoch = 0
        self._pending = []

    @property
    def steps_per_epoch(self) -> int:
        return -(-len(self.images) * self.policy.M // self.batch_size)

    def _fill(self):
        order = self.rng.permutation(len(self.images))
        for i in order:
            img = self.images[i]
            for patch in sample_patches(img, self.policy, self.rng):
                pix, pts, flags = augment(patch.pixels, patch.points, self.policy, self.aug_rng)
                m = pix.shape[0]
                gt = downsample_sum(render(pts, m, pix.shape[1], self.recipe).grid, self.stride)
                prov = {"source": img.id, "origin": patch.origin, **flags, "count": len(pts)}
                self._pending.append((normalize(pix), gt, prov))
        self.epoch += 1

    def __iter__(self):
        return self

    def __next__(self) -> PatchBatch:
        while len(self._pending) < self.batch_size:
            self._fill()
        chunk, self._pending = self._pending[:self.batch_size], self._pending[self.batch_size:]
        images = np.stack([c[0] for c in chunk])
        gts = np.stack([c[1] for c in chunk])[:, None]
        return PatchBatch(Tensor(images), Tensor(gts), [c[2] for c in chunk])


def prefetch(iterator, n_items: int, maxsize: int = 2):
    """Produce ``n_items`` from ``iterator`` on a worker thread through a bounded FIFO."""
    q: queue.Queue = queue.Queue(maxsize=maxsize)
    done = object()

    def worker():
        try:
            for _ in range(n_items):
                q.put(next(iterator))
        except Exception as exc:  # handed to the consumer
            q.put(exc)
        q.put(done)

    threading.Thread(target=worker, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        if isinstance(item, Exception):
            raise item
        yield item


def _synthetic_image(rng: np.random.Generator, H: int, W: int, n_heads: int):
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    tilt = rng.uniform(-20, 20, size=2)
    base = 70.0 + tilt[0] * yy / H + tilt[1] * xx / W
    canvas = base[..., None] + rng.normal(0.0, 8.0, size=(H, W, 3)) + rng.uniform(-15, 15, size=3)
    margin = 1.0
    points = np.column_stack([rng.uniform(margin, W - margin, n_heads), rng.uniform(margin, H - margin, n_heads)])
    tint = np.array([1.0, 0.85, 0.7])
    for x, y in points:
        radius = rng.uniform(1.5, 2.5)
        blob = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2.0 * radius ** 2))
        canvas += 140.0 * blob[..., None] * tint
    return np.clip(np.round(canvas), 0, 255).astype(np.uint8), points


def make_synthetic(out_dir, n_images: int, dims=(64, 64), head_count_range=(5, 20), seed: int = 0,
                   policy: AugmentPolicy | None = None) -> DatasetManifest:
    """Write PNG crowds of Gaussian-blob heads plus exact annotations and a manifest."""
    H, W = dims
    if H % 8 or W % 8:
        raise DataError(f"synthetic image size {H}x{W} must be divisible by 8")
    lo, hi = head_count_range
    if not 0 <= lo <= hi:
        raise DataError(f"bad head count range {head_count_range}")
    policy = policy or AugmentPolicy(M=1, m=min(H, W) // 8 * 8)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_images):
        n = int(rng.integers(lo, hi + 1))
        pixels, points = _synthetic_image(rng, H, W, n)
        stem = f"img_{i:04d}"
        Image.fromarray(pixels).save(out / f"{stem}.png", format="PNG", optimize=False)
        (out / f"{stem}.json").write_text(json.dumps([[float(x), float(y)] for x, y in points]) + "\n")
        records.append({"image": f"{stem}.png", "points": f"{stem}.json"})
    write_manifest(out / "manifest.json", records, policy)
    return load_manifest(out / "manifest.json")


def policy_dict(policy: AugmentPolicy) -> dict:
    return asdict(policy)
