"""Command-line entry point.

Subcommands: gen-data, train, eval, ablate, sample, project. Every command
takes --config and --out; stage inputs default to the conventional paths a
previous stage left under --out.
"""
from __future__ import annotations

import argparse
import os
import sys

from .config import ConfigError, load_config
from .denoiser import DenoiserError, TrainingDiverged
from .embodiment import EmbodimentError
from .worldsim import WorldError


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="embodiff",
                                description="cross-embodiment diffusion action lab")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="run config JSON")
        sp.add_argument("--out", required=True, help="output directory")

    common(sub.add_parser("gen-data", help="generate the expert dataset"))

    sp = sub.add_parser("train", help="train the configured action head")
    common(sp)
    sp.add_argument("--data", help="dataset path (default <out>/dataset.jsonl.gz)")

    sp = sub.add_parser("eval", help="evaluate the trained policy")
    common(sp)
    sp.add_argument("--ckpt", help="checkpoint path (default <out>/ckpt_final.bin)")
    sp.add_argument("--data", help="dataset path (default <out>/dataset.jsonl.gz)")
    sp.add_argument("--mptd", choices=["on", "off"],
                    help="override tree-search guidance at evaluation time")

    sp = sub.add_parser("ablate", help="run the five-row component matrix")
    common(sp)
    sp.add_argument("--seeds", help="comma-separated root seeds (default: config seed)")

    sp = sub.add_parser("sample", help="emit one action chunk as CSV")
    common(sp)
    sp.add_argument("--ckpt", help="checkpoint path (default <out>/ckpt_final.bin)")
    sp.add_argument("--embodiment", type=int, default=0)
    sp.add_argument("--task", type=int, default=0)
    sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("project", help="2-D projection of effector features")
    common(sp)
    sp.add_argument("--features", help="features CSV (default <out>/features.csv)")
    return p


def _run(args) -> int:
    from . import pipeline

    cfg = load_config(args.config)
    if args.command == "gen-data":
        path = pipeline.stage_gen_data(cfg, args.out)
        print(path)
        return 0
    if args.command == "train":
        data = args.data or os.path.join(args.out, "dataset.jsonl.gz")
        ckpt = pipeline.stage_train(cfg, data, args.out)
        print(ckpt)
        return 0
    if args.command == "eval":
        if args.mptd is not None:
            cfg["mptd"]["enabled"] = args.mptd == "on"
        ckpt = args.ckpt or os.path.join(args.out, "ckpt_final.bin")
        data = args.data or os.path.join(args.out, "dataset.jsonl.gz")
        metrics = pipeline.stage_eval(cfg, ckpt, data, args.out)
        print(f"avg success rate: {metrics['avg']:.3f}")
        return 0
    if args.command == "ablate":
        seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
        table = pipeline.run_ablation(cfg, args.out, seeds=seeds)
        for row in table["rows"]:
            print(f"{row['variant']:8s} avg={row['avg']:.3f}")
        return 0
    if args.command == "sample":
        ckpt = args.ckpt or os.path.join(args.out, "ckpt_final.bin")
        sidecar = pipeline.stage_sample(cfg, ckpt, args.out,
                                        embodiment_id=args.embodiment,
                                        task_id=args.task, seed=args.seed)
        print(f"wrote chunk.csv ({sidecar['evaluations']} network evaluations)")
        return 0
    if args.command == "project":
        feats = args.features or os.path.join(args.out, "features.csv")
        info = pipeline.stage_project(feats, args.out)
        print(f"wrote projection.csv (rank {info['rank']})")
        return 0
    raise AssertionError(f"unhandled command {args.command}")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _run(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DenoiserError, TrainingDiverged, EmbodimentError, WorldError,
            OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
