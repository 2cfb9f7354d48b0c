"""Command line: ``parlab gen-data | train | eval | bench``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import bench as bench_mod
from .config import load_config
from .data import gen_synthetic
from .train import evaluate_checkpoint, train


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _block_list(text: str) -> list[str]:
    blocks = [v.strip() for v in text.split(",") if v.strip()]
    bad = [b for b in blocks if b not in bench_mod.BLOCKS]
    if bad or not blocks:
        raise argparse.ArgumentTypeError(f"blocks must be from {bench_mod.BLOCKS}, got {text!r}")
    return blocks


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="parlab", description="Mamba/ViT attribute recognition lab")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic attribute dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--samples", type=int, required=True)
    g.add_argument("--attrs", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=32)
    g.add_argument("--eval-samples", type=int, default=0,
                   help="also write eval_manifest.txt with this many held-out samples")

    t = sub.add_parser("train", help="train a model from an INI config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)

    b = sub.add_parser("bench", help="time single Vim and ViT blocks over sequence lengths")
    b.add_argument("--block", type=_block_list, default=list(bench_mod.BLOCKS))
    b.add_argument("--seq-lens", type=_int_list, default=[512, 1024, 2048, 4096])
    b.add_argument("--repeats", type=int, default=20)
    b.add_argument("--dim", type=int, default=64)
    b.add_argument("--out", required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-data":
            m = gen_synthetic(args.out, args.samples, args.attrs, args.seed, args.height, args.width,
                              eval_samples=args.eval_samples)
            print(f"wrote {len(m)} samples to {Path(args.out) / 'manifest.txt'}")
        elif args.command == "train":
            res = train(load_config(args.config), args.out)
            print(f"best {res.best.record()}")
            print(f"checkpoints: {res.best_path} {res.final_path}")
        elif args.command == "eval":
            report, names = evaluate_checkpoint(args.ckpt, args.data)
            print(report.record())
            print(report.table(names))
        elif args.command == "bench":
            rows = bench_mod.bench(args.seq_lens, args.block, args.repeats, args.dim)
            bench_mod.write_csv(rows, args.out)
            print(",".join(bench_mod.CSV_HEADER))
            for r in rows:
                print(",".join(str(v) for v in r.as_row()))
    except (ValueError, OSError) as exc:
        print(f"parlab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
