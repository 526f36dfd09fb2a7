"""Command-line interface: gen-data, train-recon, train-planner, eval, ablate, plot."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import load_config
from .dataset import build_dataset
from .harness import PLANNERS, ablate, evaluate, train_planner, train_recon
from .plots import emit_plots


def _common(parser):
    parser.add_argument("--config", type=Path, default=None, help="key = value config file")
    parser.add_argument("--seed", type=int, default=None, help="override train.seed")
    parser.add_argument("--out", type=Path, required=True, help="run directory")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="activerecon",
                                description="active multi-view voxel reconstruction")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the procedural shape dataset")
    g.add_argument("--count", type=int, default=500)
    g.add_argument("--res", type=int, default=16)
    g.add_argument("--img", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train-fraction", type=float, default=0.8)
    g.add_argument("--out", type=Path, required=True)

    t = sub.add_parser("train-recon", help="train the recurrent encoder-decoder")
    _common(t)
    t.add_argument("--data", type=Path, default=None, help="override dataset.path")
    t.add_argument("--resume", type=Path, default=None, help="checkpoint to resume from")

    tp = sub.add_parser("train-planner", help="train the view planner (REINFORCE)")
    _common(tp)
    tp.add_argument("--data", type=Path, default=None)
    tp.add_argument("--recon", type=Path, required=True, help="reconstruction checkpoint")

    e = sub.add_parser("eval", help="IoU/entropy vs views over the test split")
    _common(e)
    e.add_argument("--data", type=Path, default=None)
    e.add_argument("--recon", type=Path, required=True)
    e.add_argument("--planner", choices=PLANNERS, required=True)
    e.add_argument("--planner-ckpt", type=Path, default=None)

    a = sub.add_parser("ablate", help="train and compare the four architecture variants")
    _common(a)
    a.add_argument("--data", type=Path, default=None)

    pl = sub.add_parser("plot", help="render IoU/entropy charts from eval CSVs")
    pl.add_argument("--out", type=Path, required=True)
    pl.add_argument("csvs", nargs="+", type=Path)
    return p


def _load_cfg(args):
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "data", None) is not None:
        overrides["dataset_path"] = str(args.data)
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-data":
            build_dataset(args.out, count=args.count, seed=args.seed,
                          resolution=args.res, image_size=args.img,
                          train_fraction=args.train_fraction)
            print(f"dataset written to {args.out}")
        elif args.command == "train-recon":
            out = train_recon(_load_cfg(args), args.out, resume=args.resume)
            print(f"checkpoints: {out['last']} (last), {out['best']} (best)")
        elif args.command == "train-planner":
            out = train_planner(_load_cfg(args), args.recon, args.out)
            print(f"planner checkpoint: {out['planner']}")
        elif args.command == "eval":
            path = evaluate(_load_cfg(args), args.recon, args.planner, args.out,
                            planner_ckpt=args.planner_ckpt)
            print(f"metrics: {path}")
        elif args.command == "ablate":
            table = ablate(_load_cfg(args), args.out)
            print(f"ablation table: {table}")
        elif args.command == "plot":
            for p in emit_plots(args.csvs, args.out):
                print(f"wrote {p}")
        return 0
    except Exception as exc:  # one-line machine-parsable failure
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
