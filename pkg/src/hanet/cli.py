"""Command-line entry point: ``hanet {synth,make-gt,train,eval,predict,ablate}``.

Exit codes: 0 ok, 1 usage, 2 validation, 3 numeric abort. Every command
writes its resolved configuration to ``<out>/config.json`` before doing
any work; flags override values read from ``--config``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from hanet.data import AugmentPolicy, DataError, load_record, make_synthetic, ManifestRecord, read_manifest_entries
from hanet.groundtruth import KernelRecipe, render, write_dmap, write_pgm
from hanet.model import FULL_PLAN, TOY_PLAN, ModelConfig
from hanet.tensor import ShapeError
from hanet.train import (
    ABLATION_SUITES,
    RunConfig,
    TrainingAborted,
    ablation_suite,
    evaluate,
    model_from_checkpoint,
    predict_map,
    train,
)

log = logging.getLogger("hanet")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2, 3
PLANS = {"toy": TOY_PLAN, "full": FULL_PLAN}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _range(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got {text!r}") from None
    return lo, hi


def _scales(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}") from None


def _echo(out: Path, config: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="RunConfig JSON (e.g. an earlier config echo)")
    p.add_argument("--manifest", help="training manifest")
    p.add_argument("--test-manifest")
    p.add_argument("--plan", choices=sorted(PLANS))
    p.add_argument("--scales", type=_scales, help="e.g. 1,2,3,6; empty string bypasses the cascade")
    p.add_argument("--no-backend", action="store_true", default=None)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--iteration-unit", choices=["steps", "epochs"])
    p.add_argument("--seed", type=int)
    p.add_argument("--patch", type=int, help="patch side m")
    p.add_argument("--patches", type=int, help="patches per image M")
    p.add_argument("--gray-prob", type=float)
    p.add_argument("--hflip-prob", type=float)
    p.add_argument("--gt-mode", choices=["fixed", "adaptive"])
    p.add_argument("--eval-every", type=int)
    p.add_argument("--prefetch", type=int)


def resolve_run_config(args) -> RunConfig:
    base = RunConfig.from_dict(json.loads(args.config.read_text())) if args.config else RunConfig()
    model = base.model
    if args.plan:
        model = replace(model, plan=PLANS[args.plan])
    if args.scales is not None:
        model = replace(model, scales=args.scales)
    if args.no_backend:
        model = replace(model, use_backend=False)
    fields = {
        "lr": args.lr, "weight_decay": args.weight_decay, "momentum": args.momentum,
        "batch_size": args.batch_size, "iterations": args.iterations, "iteration_unit": args.iteration_unit,
        "seed": args.seed, "train_manifest": args.manifest, "test_manifest": args.test_manifest,
        "eval_every": args.eval_every, "prefetch": args.prefetch,
    }
    updates = {k: v for k, v in fields.items() if v is not None}
    pol_updates = {k: v for k, v in {"m": args.patch, "M": args.patches, "gray_prob": args.gray_prob,
                                     "hflip_prob": args.hflip_prob}.items() if v is not None}
    policy = base.policy
    if pol_updates or (policy is None and updates.get("train_manifest", base.train_manifest)):
        if policy is None:
            manifest = updates.get("train_manifest", base.train_manifest)
            policy = _manifest_policy(manifest) if manifest else AugmentPolicy()
        policy = replace(policy, **pol_updates)
    recipe = base.recipe if args.gt_mode is None else replace(base.recipe, mode=args.gt_mode)
    # replace() re-validates against the final policy
    return replace(base, model=model, policy=policy, recipe=recipe, **updates)


def _manifest_policy(path) -> AugmentPolicy:
    doc = json.loads(Path(path).read_text())
    pol = doc.get("policy", {})
    return AugmentPolicy(**{k: pol[k] for k in ("M", "m", "gray_prob", "hflip_prob") if k in pol})


def cmd_synth(args) -> int:
    H, W = args.size
    lo, hi = args.heads
    if H % 8 or W % 8:
        raise DataError(f"--size {H}x{W}: both dimensions must be divisible by 8")
    m = args.patch or min(H, W)
    echo = {"command": "synth", "images": args.images, "size": [H, W], "heads": [lo, hi], "seed": args.seed,
            "policy": {"M": args.patches, "m": m}}
    _echo(args.out, echo)
    man = make_synthetic(args.out, args.images, (H, W), (lo, hi), args.seed, AugmentPolicy(M=args.patches, m=m))
    print(f"wrote {len(man)} images to {args.out}")
    return EXIT_OK


def cmd_make_gt(args) -> int:
    recipe = KernelRecipe(mode=args.mode, window=args.window, sigma=args.sigma, beta=args.beta, k_neighbors=args.k)
    _echo(args.out, {"command": "make-gt", "manifest": str(args.manifest), "recipe": recipe.__dict__})
    failures = 0
    for rid, img_path, pts_path in read_manifest_entries(args.manifest):
        try:
            img = load_record(ManifestRecord(img_path, pts_path, rid))
            H, W = img.pixels.shape[:2]
            dm = render(img.points, H, W, recipe)
            write_dmap(args.out / f"{rid}.dmap", dm.grid)
            write_pgm(args.out / f"{rid}.pgm", dm.grid)
            note = " (fixed fallback)" if dm.meta.get("fallback") else ""
            print(f"{rid}\t{img.count}\t{dm.count:.6f}{note}")
        except (OSError, ValueError) as exc:
            failures += 1
            print(f"{rid}\tFAILED\t{exc}", file=sys.stderr)
    return EXIT_VALIDATION if failures else EXIT_OK


def cmd_train(args) -> int:
    run = resolve_run_config(args)
    _echo(args.out, run.to_dict())
    res = train(run, out_dir=args.out)
    print(f"trained {len(res.losses)} steps; first loss {res.losses[0]:.6g}, last loss {res.losses[-1]:.6g}")
    print(f"checkpoint: {res.checkpoint_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _echo(args.out, {"command": "eval", "checkpoint": str(args.checkpoint), "manifest": str(args.manifest)})
    rep = evaluate(str(args.checkpoint), args.manifest)
    rep.write_csv(args.out / "eval.csv")
    print(f"MAE {rep.mae:.6f}  MSE {rep.mse:.6f}  ({len(rep.per_image)} images)")
    return EXIT_OK


def cmd_predict(args) -> int:
    _echo(args.out, {"command": "predict", "checkpoint": str(args.checkpoint),
                     "images": [str(p) for p in args.images], "clamp": args.clamp})
    model = model_from_checkpoint(args.checkpoint)
    for path in args.images:
        with Image.open(path) as im:
            pixels = np.asarray(im.convert("RGB"))
        dmap = predict_map(model, pixels)
        stem = Path(path).stem
        write_dmap(args.out / f"{stem}.dmap", dmap)
        write_pgm(args.out / f"{stem}.pgm", dmap)
        count = float(np.clip(dmap, 0, None).sum() if args.clamp else dmap.sum())
        print(f"{stem}\t{count:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    run = resolve_run_config(args)
    _echo(args.out, {**run.to_dict(), "suite": args.suite})
    rows = ablation_suite(run, args.suite, args.out / f"ablation_{args.suite}.csv")
    for r in rows:
        status = f"MAE {r.report.mae:.4f} MSE {r.report.mse:.4f}" if r.report else f"failed: {r.error}"
        print(f"{r.name}\t{status}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hanet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic crowd dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--images", type=int, required=True)
    p.add_argument("--size", type=_size, required=True, help="HxW, divisible by 8")
    p.add_argument("--heads", type=_range, default=(5, 20), help="LO:HI heads per image")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patch", type=int, help="patch side m recorded in the manifest (default: image side)")
    p.add_argument("--patches", type=int, default=1, help="patches per image M recorded in the manifest")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("make-gt", help="render density maps for a manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--mode", choices=["fixed", "adaptive"], default="fixed")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--window", type=int, default=15)
    p.add_argument("--sigma", type=float, default=4.0)
    p.add_argument("--beta", type=float, default=0.3)
    p.add_argument("--k", type=int, default=3)
    p.set_defaults(func=cmd_make_gt)

    p = sub.add_parser("train", help="train a model")
    _add_run_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="whole-image MAE/MSE of a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="density maps and counts for images")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--clamp", action="store_true", help="clamp negative pixels before counting")
    p.add_argument("images", type=Path, nargs="+")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="run an ablation study")
    _add_run_flags(p)
    p.add_argument("--suite", choices=ABLATION_SUITES, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ShapeError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
