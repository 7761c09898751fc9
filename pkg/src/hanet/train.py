"""SGD training on the pixel-level MSE loss, count evaluation and ablations."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from hanet.data import AugmentPolicy, BatchStream, DataError, DatasetManifest, load_manifest, normalize, prefetch
from hanet.groundtruth import KernelRecipe
from hanet.model import (
    STRIDE,
    HANet,
    ModelCheckpoint,
    ModelConfig,
    capture,
    count_from_map,
    load_checkpoint,
    restore,
    save_checkpoint,
)
from hanet.tensor import ShapeError, Tensor, fresh_tape, make_result, no_grad

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, iteration: int, loss: float, checkpoint: str | None):
        super().__init__(f"non-finite loss {loss} at iteration {iteration}; last checkpoint: {checkpoint}")
        self.iteration = iteration
        self.loss = loss
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce a training run."""

    model: ModelConfig = ModelConfig()
    lr: float = 1e-4
    weight_decay: float = 5e-4
    momentum: float = 0.0
    batch_size: int = 8
    iterations: int = 2000
    iteration_unit: str = "steps"
    seed: int = 0
    train_manifest: str | None = None
    test_manifest: str | None = None
    policy: AugmentPolicy | None = None
    recipe: KernelRecipe = KernelRecipe()
    eval_every: int = 0
    loss_normalization: str = "batch"
    prefetch: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.iteration_unit not in ("steps", "epochs"):
            raise ValueError(f"iteration_unit must be 'steps' or 'epochs', got {self.iteration_unit!r}")
        if self.loss_normalization not in ("batch", "pixels"):
            raise ValueError(f"loss_normalization must be 'batch' or 'pixels', got {self.loss_normalization!r}")
        if self.policy is not None and self.model.scales and max(self.model.scales) > self.policy.m // STRIDE:
            raise ValueError(f"scale {max(self.model.scales)} exceeds the {self.policy.m // STRIDE}-cell feature map of {self.policy.m}px patches")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d["model"]) if "model" in d else ModelConfig()
        if d.get("policy") is not None:
            d["policy"] = AugmentPolicy(**d["policy"])
        if "recipe" in d:
            d["recipe"] = KernelRecipe(**d["recipe"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def mse_loss(pred: Tensor, gt: Tensor, normalization: str = "batch") -> Tensor:
    """Sum of squared pixel errors per image, averaged over the batch.

    ``normalization="pixels"`` divides by the pixel count as well.
    """
    if pred.shape != gt.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} and ground truth {gt.shape} differ")
    diff = pred.data - gt.data
    denom = pred.shape[0] if normalization == "batch" else diff.size
    out = np.asarray((diff * diff).sum() / denom)

    def backward_fn(g):
        d = (2.0 / denom) * g * diff
        return d, -d

    return make_result("mse_loss", out, (pred, gt), backward_fn)


def sgd_step(params, lr: float, weight_decay: float = 0.0, momentum: float = 0.0, velocity: dict | None = None) -> None:
    """p <- p - lr * (grad + weight_decay * p), then zero the grads.

    With ``momentum`` > 0 a ``velocity`` dict keyed by parameter name
    carries the running update direction.
    """
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {getattr(p, 'name', '?')!r} has no gradient")
    for p in params:
        step = p.grad + weight_decay * p.data
        if momentum:
            v = velocity.get(p.name)
            step = step if v is None else momentum * v + step
            velocity[p.name] = step
        p.data = p.data - lr * step
        p.grad = None


@dataclass
class TrainResult:
    model: HANet
    checkpoint: ModelCheckpoint
    losses: list
    checkpoint_path: str | None = None


def _rngs(seed: int):
    model_ss, data_ss, aug_ss = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(model_ss), np.random.default_rng(data_ss), np.random.default_rng(aug_ss)


def _load_images(manifest) -> tuple:
    m = manifest if isinstance(manifest, DatasetManifest) else load_manifest(manifest)
    if not len(m):
        raise DataError("manifest has no records")
    return m, m.images()


def train(run: RunConfig, out_dir=None, manifest: DatasetManifest | None = None, images=None) -> TrainResult:
    """Run SGD for ``run.iterations`` steps (or epochs) and return the trained model.

    With ``out_dir`` the loss trace is written to ``loss.csv`` and
    checkpoints to ``checkpoint.bin`` (end of run and every ``eval_every``).
    """
    model_rng, data_rng, aug_rng = _rngs(run.seed)
    if images is None:
        if manifest is None:
            if run.train_manifest is None:
                raise DataError("no training manifest configured")
            manifest = load_manifest(run.train_manifest)
        manifest, images = _load_images(manifest)
    policy = run.policy or (manifest.policy if manifest is not None else AugmentPolicy())
    if run.model.scales and max(run.model.scales) > policy.m // STRIDE:
        raise ValueError(f"scale {max(run.model.scales)} exceeds the feature map of {policy.m}px patches")

    model = HANet(run.model, model_rng)
    model.train()
    stream = BatchStream(images, policy, run.recipe, run.batch_size, data_rng, aug_rng, STRIDE)
    total = run.iterations if run.iteration_unit == "steps" else run.iterations * stream.steps_per_epoch
    batches = prefetch(stream, total, run.prefetch) if run.prefetch else (next(stream) for _ in range(total))

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ckpt_path = str(out / "checkpoint.bin") if out is not None else None
    last_saved = None
    params = model.parameters()
    velocity: dict = {}
    losses = []

    def snapshot(it):
        return capture(model, run.to_dict(), it, {"data": data_rng.bit_generator.state, "augment": aug_rng.bit_generator.state})

    for it, batch in enumerate(batches, start=1):
        with fresh_tape():
            pred = model(batch.images)
            loss = mse_loss(pred, batch.gt_maps, run.loss_normalization)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingAborted(it, value, last_saved)
            loss.backward()
        sgd_step(params, run.lr, run.weight_decay, run.momentum, velocity)
        losses.append(value)
        log.debug("iter %d loss %.6g", it, value)
        if run.eval_every and it % run.eval_every == 0 and it < total:
            if out is not None:
                save_checkpoint(ckpt_path, snapshot(it))
                last_saved = ckpt_path
            if run.test_manifest:
                rep = evaluate(model, run.test_manifest)
                log.info("iter %d: MAE %.3f MSE %.3f", it, rep.mae, rep.mse)
                model.train()

    ckpt = snapshot(len(losses))
    if out is not None:
        save_checkpoint(ckpt_path, ckpt)
        write_loss_csv(out / "loss.csv", losses)
    return TrainResult(model, ckpt, losses, ckpt_path)


def write_loss_csv(path, losses) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(losses, start=1):
            w.writerow([i, repr(float(v))])


def model_from_checkpoint(ckpt: ModelCheckpoint | str | Path) -> HANet:
    if not isinstance(ckpt, ModelCheckpoint):
        ckpt = load_checkpoint(ckpt)
    cfg = RunConfig.from_dict(ckpt.config)
    model = HANet(cfg.model, np.random.default_rng(0))
    restore(model, ckpt)
    return model


@dataclass
class EvalReport:
    mae: float
    mse: float
    per_image: list
    config: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "estimate", "ground_truth"])
            for rid, est, gt in self.per_image:
                w.writerow([rid, repr(float(est)), repr(float(gt))])
            w.writerow(["MAE", repr(self.mae), ""])
            w.writerow(["MSE", repr(self.mse), ""])


def count_metrics(estimates, truths) -> tuple[float, float]:
    """Mean absolute error and root-mean-square error of per-image counts."""
    est = np.asarray(estimates, dtype=np.float64)
    gt = np.asarray(truths, dtype=np.float64)
    if est.shape != gt.shape or est.size == 0:
        raise ValueError("need equally many (non-zero) estimates and ground truths")
    err = est - gt
    mae = math.fsum(np.abs(err)) / err.size
    # scale before squaring so tiny or huge errors neither underflow nor overflow
    scale = float(np.abs(err).max())
    if scale == 0.0 or not math.isfinite(scale):
        return mae, scale
    r = err / scale
    mse = scale * math.sqrt(math.fsum(r * r) / err.size)
    return mae, mse


def pad_to_stride(pixels: np.ndarray, stride: int = STRIDE) -> np.ndarray:
    """Reflect-pad H x W x 3 pixels at the bottom/right up to a multiple of ``stride``."""
    H, W = pixels.shape[:2]
    ph, pw = (-H) % stride, (-W) % stride
    if ph == 0 and pw == 0:
        return pixels
    mode = "reflect" if ph < H and pw < W else "symmetric"
    return np.pad(pixels, ((0, ph), (0, pw), (0, 0)), mode=mode)


def predict_map(model: HANet, pixels: np.ndarray) -> np.ndarray:
    """Eval-mode density map (h, w) for one H x W x 3 image."""
    model.eval()
    with no_grad():
        x = Tensor(normalize(pad_to_stride(pixels))[None])
        return model(x).data[0, 0]


def evaluate(model, manifest) -> EvalReport:
    """Whole-image counting error over a manifest. Pure given the model weights."""
    start = time.perf_counter()
    if not isinstance(model, HANet):
        ckpt = model if isinstance(model, ModelCheckpoint) else load_checkpoint(model)
        config = ckpt.config
        model = model_from_checkpoint(ckpt)
    else:
        config = {"model": model.cfg.to_dict()}
    manifest = manifest if isinstance(manifest, DatasetManifest) else load_manifest(manifest, split="test")
    if not len(manifest):
        raise DataError("cannot evaluate on an empty manifest")
    rows = []
    for i in range(len(manifest)):
        img = manifest.load(i)
        est = float(count_from_map(predict_map(model, img.pixels)[None, None])[0])
        rows.append((img.id, est, float(img.count)))
    mae, mse = count_metrics([r[1] for r in rows], [r[2] for r in rows])
    return EvalReport(mae, mse, rows, config, time.perf_counter() - start)


ABLATION_SUITES = ("components", "fusion_order", "patch_size")


def _variants(base: RunConfig, suite: str) -> list:
    """(name, builder) pairs; building may raise, which the suite records per row."""
    mc = base.model

    def with_model(**kw):
        return lambda: replace(base, model=replace(mc, **kw))

    if suite == "components":
        return [
            ("backbone", with_model(scales=(), use_backend=False)),
            ("backbone+backend", with_model(scales=(), use_backend=True)),
            ("backbone+HAM(PES-1)+backend", with_model(scales=(1,), use_backend=True)),
            ("backbone+HAM(PES-1,2)+backend", with_model(scales=(1, 2), use_backend=True)),
            ("backbone+HAM(PES-1,2,3)+backend", with_model(scales=(1, 2, 3), use_backend=True)),
            ("backbone+HAM(PES-1,2,3,6)+backend", with_model(scales=(1, 2, 3, 6), use_backend=True)),
        ]
    if suite == "fusion_order":
        orders = [(3, 2, 1), (1, 2, 3), (6, 3, 2, 1), (1, 2, 3, 6)]
        return [(f"backbone+HAM(PES-{','.join(map(str, o))})+backend", with_model(scales=o, use_backend=True)) for o in orders]
    if suite == "patch_size":
        pol = base.policy or AugmentPolicy()
        return [(f"{m}x{m}", lambda m=m: replace(base, policy=replace(pol, m=m))) for m in (128, 192, 256)]
    raise ValueError(f"unknown ablation suite {suite!r}; choose from {ABLATION_SUITES}")


def ablation_rows(base: RunConfig, suite: str) -> list[tuple[str, RunConfig]]:
    """Named run configurations for one ablation study, in table order."""
    return [(name, build()) for name, build in _variants(base, suite)]


@dataclass
class AblationRow:
    suite: str
    name: str
    config: dict
    report: EvalReport | None
    wall_time: float
    error: str | None = None


def ablation_suite(base: RunConfig, suite: str, out_csv=None) -> list[AblationRow]:
    """Train and evaluate every row of ``suite``; a failing row is recorded and skipped."""
    if suite not in ABLATION_SUITES:
        raise ValueError(f"unknown ablation suite {suite!r}; choose from {ABLATION_SUITES}")
    manifest = load_manifest(base.train_manifest) if base.train_manifest else None
    if manifest is None:
        raise DataError("ablation needs a training manifest")
    if base.policy is None:
        base = replace(base, policy=manifest.policy)
    variants = _variants(base, suite)
    images = manifest.images()
    test = base.test_manifest or base.train_manifest
    results = []
    for name, build in variants:
        start = time.perf_counter()
        cfg = None
        try:
            cfg = build()
            res = train(cfg, manifest=manifest, images=images)
            rep = evaluate(res.model, test)
            results.append(AblationRow(suite, name, cfg.to_dict(), rep, time.perf_counter() - start))
        except Exception as exc:  # recorded per row, suite continues
            log.error("ablation row %s failed: %s", name, exc)
            config = (cfg or base).to_dict()
            results.append(AblationRow(suite, name, config, None, time.perf_counter() - start, str(exc)))
    if out_csv is not None:
        write_ablation_csv(out_csv, results)
    return results


def write_ablation_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["suite", "row", "scales", "use_backend", "patch", "mae", "mse", "wall_time", "status"])
        for r in rows:
            model = r.config["model"]
            patch = r.config["policy"]["m"] if r.config.get("policy") else ""
            mae = repr(r.report.mae) if r.report else ""
            mse = repr(r.report.mse) if r.report else ""
            w.writerow([
                r.suite, r.name, " ".join(map(str, model["scales"])), model["use_backend"], patch,
                mae, mse, f"{r.wall_time:.3f}", "ok" if r.error is None else f"error: {r.error}",
            ])
