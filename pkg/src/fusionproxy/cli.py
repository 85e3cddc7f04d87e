"""Command-line entry points: cache, train, fuse, bench, eval.

Every command prints a one-line JSON header echoing its fully resolved
configuration, runs deterministically under a fixed seed, and exits nonzero
on any error. The FUSIONPROXY_CACHE environment variable supplies the
default cache root.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .bench import bench_model
from .cache import CacheConfig, build_cache
from .images import PerturbationSpec, load_png, save_png
from .losses import LossWeights
from .metrics import evaluate_dir
from .student import load_checkpoint
from .training import TrainConfig, Trainer

CACHE_ENV = "FUSIONPROXY_CACHE"


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _header(command: str, resolved: dict) -> None:
    print(json.dumps({"command": command, **resolved}))


def _env_cache_default() -> str | None:
    return os.environ.get(CACHE_ENV)


def cmd_cache(args: argparse.Namespace) -> int:
    cache_root = args.out or _env_cache_default()
    if not cache_root:
        raise ValueError(f"provide --out or set {CACHE_ENV}")
    config = CacheConfig(
        teachers=tuple(t for t in args.teachers.split(",") if t),
        n_per_teacher=args.n,
        grid=args.grid,
        tau=args.tau,
        seed=args.seed,
    )
    _header("cache", {"data": args.data, "out": str(cache_root), **config.as_dict()})
    build_cache(args.data, cache_root, config, log=_say)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cache_root = args.cache or _env_cache_default()
    if not cache_root:
        raise ValueError(f"provide --cache or set {CACHE_ENV}")
    config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        crop=args.crop,
        tau=args.tau,
        weights=LossWeights(args.lambda_pix, args.lambda_mfm, args.lambda_ssim),
        misalign=PerturbationSpec(args.misalign_px, args.misalign_deg),
        variant=args.variant,
        seed=args.seed,
    )
    out = Path(args.out)
    _header("train", {"cache": str(cache_root), "out": str(out), **config.as_dict()})
    log_path = out.with_name(out.stem + ".log.ndjson")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w") as log_file:
        trainer = Trainer(
            cache_root,
            config,
            on_record=lambda rec: log_file.write(json.dumps(rec.as_dict()) + "\n"),
            log=_say,
        )
        _say(f"training {config.variant} for {trainer.total_steps} steps on {len(trainer.pairs)} pairs")
        trainer.train()
        trainer.save(out)
        trainer.save_state(out.with_name(out.stem + ".state.fpz"))
    _say(f"checkpoint written: {out}")
    return 0


def cmd_fuse(args: argparse.Namespace) -> int:
    _header("fuse", {"ckpt": args.ckpt, "ir": args.ir, "vis": args.vis, "out": args.out})
    model, _ = load_checkpoint(args.ckpt)
    ir = load_png(args.ir, mode="L")
    vis = load_png(args.vis, mode="RGB")
    fused = model.fuse_arrays(ir, vis)
    save_png(args.out, fused)
    _say(f"fused image written: {args.out}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    import torch

    torch.set_num_threads(1)
    _header(
        "bench",
        {
            "ckpt": args.ckpt,
            "height": args.height,
            "width": args.width,
            "runs": args.runs,
            "warmup": args.warmup,
        },
    )
    model, _ = load_checkpoint(args.ckpt)
    report = bench_model(model, args.height, args.width, runs=args.runs, warmup=args.warmup)
    print(json.dumps(report.as_dict()))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    _header(
        "eval",
        {"fused": args.fused, "ir": args.ir, "vis": args.vis, "report": args.report},
    )
    report = evaluate_dir(args.fused, args.ir, args.vis, report_path=args.report)
    print(json.dumps({"count": report["count"], "aggregate": report["aggregate"]}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusionproxy",
        description="Teacher-ensemble distillation for infrared-visible image fusion.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cache", help="draw teacher ensembles and cache their statistics")
    p.add_argument("--data", required=True, help="dataset root with ir/ and vis/ subdirectories")
    p.add_argument("--out", default=None, help=f"cache root (default: ${CACHE_ENV})")
    p.add_argument("--teachers", required=True, help="comma-separated teacher names")
    p.add_argument("--n", type=int, required=True, help="samples per teacher")
    p.add_argument("--grid", type=int, default=64, help="common feature grid size")
    p.add_argument("--tau", type=float, default=1.0, help="routing temperature stored in the cache")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_cache)

    p = sub.add_parser("train", help="train a fusion student against a statistics cache")
    p.add_argument("--cache", default=None, help=f"cache root (default: ${CACHE_ENV})")
    p.add_argument("--out", required=True, help="checkpoint file to write")
    p.add_argument("--epochs", type=int, default=160)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--crop", type=int, default=256)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--lambda-pix", type=float, default=1.0)
    p.add_argument("--lambda-mfm", type=float, default=0.5)
    p.add_argument("--lambda-ssim", type=float, default=0.2)
    p.add_argument("--misalign-px", type=float, default=10.0)
    p.add_argument("--misalign-deg", type=float, default=2.0)
    p.add_argument("--variant", default="default")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("fuse", help="fuse one infrared/visible pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ir", required=True)
    p.add_argument("--vis", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_fuse)

    p = sub.add_parser("bench", help="measure median forward latency")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--height", type=int, default=480)
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--runs", type=int, default=1000)
    p.add_argument("--warmup", type=int, default=50)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("eval", help="score fused images against their sources")
    p.add_argument("--fused", required=True)
    p.add_argument("--ir", required=True)
    p.add_argument("--vis", required=True)
    p.add_argument("--report", default=None, help="optional JSON report path")
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, KeyError, RuntimeError, OSError) as exc:
        _say(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
