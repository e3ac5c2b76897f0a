"""Command line entry point: ``denseprob {generate,train,infer,evaluate,ablate}``.

Exit codes: 0 on success, 2 on configuration errors, 3 on numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

import numpy as np

from . import experiments
from .config import STAGES, ConfigError, ExperimentConfig, load, validate
from .training import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def build_parser():
    p = argparse.ArgumentParser(prog="denseprob", description="Probabilistic dense matching toy pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGES:
        s = sub.add_parser(name, help=f"run the {name} stage")
        s.add_argument("--config", help="experiment config file (INI sections)")
        s.add_argument("--seed", type=int, help="master seed (overrides the config)")
        s.add_argument("--out", help="output directory (overrides the config)")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = load(args.config) if args.config else ExperimentConfig()
    over = {"stage": args.command}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = args.out
    cfg = dataclasses.replace(cfg, **over)
    validate(cfg)
    return cfg


def _report(command, result):
    if command == "generate":
        for split, d in result.items():
            print(f"{split}: {d}")
    elif command == "train":
        print(f"final loss {np.mean(result.losses[-20:]):.4f}" if result.losses else "no iterations run")
    elif command == "infer":
        print(f"{len(result.flow)} predictions written")
    elif command == "evaluate":
        print(" ".join(f"{k}={v:.4f}" for k, v in result.summary.items()))
    elif command == "ablate":
        for row in result:
            vals = " ".join(f"{k}={v:.4f}" for k, v in row.items() if isinstance(v, float))
            print(f"{row['variant']:<14} {row['status']:<7} {vals}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        run = getattr(experiments, f"run_{args.command}")
        result = run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    _report(args.command, result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
