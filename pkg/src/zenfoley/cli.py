"""Command-line entry point.

    zenfoley <split|prepare|train-vqvae|extract-codes|train-snail|generate|evaluate|dry-run>
             --config PATH --seed N --out DIR [stage options]

Exit status 0 on success.  On failure a single JSON line {"error": <category>, "message": ...}
goes to stderr and the status is nonzero.
"""
from __future__ import annotations

import argparse
import json
import sys

from . import config, pipeline
from .errors import ZenFoleyError

EXIT_CODES = {"config": 2, "format": 3, "missing-files": 4, "versioning": 5, "coverage": 6, "training": 7}


def _u64(text):
    value = int(text, 0)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 bits, got {text}")
    return value


def build_parser():
    parser = argparse.ArgumentParser(prog="zenfoley", description="Class-conditional foley synthesis pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    def stage(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value run configuration (defaults: full scale)")
        p.add_argument("--seed", type=_u64, default=None, help="overrides the config seed")
        p.add_argument("--out", required=True, help="run directory")
        return p

    stage("split", "tag per-class validation clips; writes OUT/manifest.tsv")
    stage("prepare", "build CEmbed caches and corpus statistics")
    for name in ("train-vqvae", "train-snail"):
        p = stage(name, f"train the {'autoencoder' if name == 'train-vqvae' else 'prior'}")
        p.add_argument("--resume", help="checkpoint to resume from")
        p.add_argument("--steps", type=int, help="stop after this global step")
    p = stage("extract-codes", "encode every cached clip to a code grid")
    p.add_argument("--checkpoint", help="VQ-VAE checkpoint (default: latest)")
    p = stage("generate", "sample, decode and vocode clips per category")
    p.add_argument("--per-class", type=int, help="clips per category (default: config)")
    p = stage("evaluate", "per-category FAD of generated clips against the validation split")
    p.add_argument("--generated", help="generated manifest (default: OUT/generated/manifest.tsv)")
    p.add_argument("--reference", help="reference manifest (default: validation split)")
    stage("dry-run", "push one synthetic clip through every stage and print shapes")
    return parser


def run(args):
    cfg = config.load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    out = args.out
    if args.command == "split":
        m = pipeline.split(cfg, out, seed)
        return {"train": len(m.subset("train")), "val": len(m.subset("val"))}
    if args.command == "prepare":
        rows, stats = pipeline.prepare(cfg, out, seed)
        return {"clips": len(rows), **stats.to_dict()}
    if args.command in ("train-vqvae", "train-snail"):
        fn = pipeline.train_vqvae if args.command == "train-vqvae" else pipeline.train_snail
        trainer = fn(cfg, out, seed, resume=args.resume, until=args.steps)
        return {"step": trainer.step, "last": trainer.history[-1] if trainer.history else None}
    if args.command == "extract-codes":
        grids, _ = pipeline.extract_code_files(cfg, out, args.checkpoint)
        return {"grids": len(grids), "shape": list(grids.shape[1:])}
    if args.command == "generate":
        m = pipeline.generate(cfg, out, seed, args.per_class)
        return {"files": len(m)}
    if args.command == "evaluate":
        report = pipeline.evaluate(cfg, out, args.generated, args.reference)
        sys.stdout.write(report.to_table())
        return None
    shapes = pipeline.shape_dry_run(cfg, seed)
    return {k: list(v) for k, v in shapes.items()}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        result = run(args)
    except ZenFoleyError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        cat = exc.category
        return EXIT_CODES.get(cat, EXIT_CODES.get(cat.split("-")[0], 1))
    except OSError as exc:
        print(json.dumps({"error": "io", "message": str(exc)}), file=sys.stderr)
        return 1
    if result is not None:
        print(json.dumps(result, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
