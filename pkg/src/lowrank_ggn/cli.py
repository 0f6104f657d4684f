"""Command line entry point: ``lowrank-ggn <subcommand> [flags]``.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 IO failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from lowrank_ggn import experiments
from lowrank_ggn.errors import (
    ConfigError,
    CurvatureError,
    DimensionCapError,
    EmptySubsetError,
    UnknownActivationError,
    UnknownLossError,
    UnknownReferenceError,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

CONFIG_ERRORS = (ConfigError, UnknownReferenceError, UnknownActivationError, UnknownLossError,
                 EmptySubsetError, DimensionCapError, json.JSONDecodeError, KeyError, TypeError)

# flag destination -> dotted config key
SHARED_KEYS = {
    "seed": "seed",
    "curvature": "curvature.factor_mode",
    "samples": "curvature.sample_mode",
    "sub_size": "curvature.sub_size",
    "mc_samples": "curvature.mc_samples",
    "block": "curvature.block_mode",
    "clip": "curvature.clip",
    "damping": "analysis.damping",
    "data": "data.path",
}
COMMAND_KEYS = {
    "gen-data": {"classes": "data.classes", "dim": "data.dim",
                 "n_per_class": "data.n_per_class", "spread": "data.spread"},
    "train": {"hidden": "net.hidden", "activation": "net.activation", "loss": "net.loss",
              "lr": "train.lr", "momentum": "train.momentum", "epochs": "train.epochs",
              "batch_size": "train.batch_size", "checkpoints": "train.checkpoints"},
    "spectrum": {"batch_size": "analysis.batch_size"},
    "overlap": {"batch_size": "analysis.batch_size", "repeats": "analysis.repeats",
                "reference": "analysis.reference"},
    "derivs": {"batch_size": "analysis.batch_size"},
    "newton": {"batch_size": "analysis.batch_size", "newton_mode": "analysis.newton_mode"},
    "bench": {"batch_size": "analysis.batch_size", "k_max": "analysis.k_max",
              "bench_repeats": "analysis.bench_repeats"},
}


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--data", type=Path, help="dataset directory (features.csv, labels.csv)")
    p.add_argument("--curvature", choices=("exact", "mc"))
    p.add_argument("--samples", choices=("mb", "sub"))
    p.add_argument("--sub-size", type=int)
    p.add_argument("--mc-samples", type=int)
    p.add_argument("--block", choices=("full", "layerwise"))
    p.add_argument("--clip", type=float)
    p.add_argument("--damping", type=float)


def _checkpoints(p: argparse.ArgumentParser, many: bool = True) -> None:
    p.add_argument("checkpoints", type=Path, nargs="+" if many else 1, metavar="CHECKPOINT")
    p.add_argument("--batch-size", type=int, help="analysis mini-batch size")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lowrank-ggn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic Gaussian-blob dataset")
    _shared(p)
    p.add_argument("--classes", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--n-per-class", type=int)
    p.add_argument("--spread", type=float)

    p = sub.add_parser("train", help="SGD with momentum, checkpoints on a log grid")
    _shared(p)
    p.add_argument("--hidden", type=int, nargs="*")
    p.add_argument("--activation", choices=("relu", "tanh", "sigmoid", "identity"))
    p.add_argument("--loss", choices=("cross_entropy", "square"))
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--checkpoints", type=int, help="number of log-grid points")

    p = sub.add_parser("spectrum", help="GGN eigenvalues of checkpoints")
    _shared(p)
    _checkpoints(p)

    p = sub.add_parser("overlap", help="top-C eigenspace overlap with a reference")
    _shared(p)
    _checkpoints(p)
    p.add_argument("--repeats", type=int, help="number of mini-batch draws")
    p.add_argument("--reference", help="full_batch_ggn, mini_batch_ggn or fd_hessian")

    p = sub.add_parser("derivs", help="per-sample directional derivatives and SNRs")
    _shared(p)
    _checkpoints(p)

    p = sub.add_parser("newton", help="damped Newton step and its effect on the loss")
    _shared(p)
    _checkpoints(p)
    p.add_argument("--newton-mode", choices=("eigen", "inversion_lemma"))

    p = sub.add_parser("bench", help="time Gram method against power iteration")
    _shared(p)
    _checkpoints(p, many=False)
    p.add_argument("--k-max", type=int)
    p.add_argument("--bench-repeats", type=int)
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    keys = {**SHARED_KEYS, **COMMAND_KEYS[args.command]}
    out = {}
    for dest, dotted in keys.items():
        value = getattr(args, dest, None)
        if isinstance(value, Path):
            value = str(value)
        out[dotted] = value
    return out


def _data_dir(cfg: dict) -> str:
    if cfg["data"]["path"] is None:
        raise ConfigError("no dataset given; pass --data or set data.path")
    return cfg["data"]["path"]


def run(args: argparse.Namespace) -> None:
    cfg = experiments.load_config(args.config, _overrides(args))
    out = args.out
    if args.command == "gen-data":
        experiments.gen_data(cfg, out)
    elif args.command == "train":
        experiments.train(cfg, _data_dir(cfg), out)
    elif args.command == "spectrum":
        experiments.run_spectrum(cfg, args.checkpoints, _data_dir(cfg), out)
    elif args.command == "overlap":
        experiments.run_overlap(cfg, args.checkpoints, _data_dir(cfg), out)
    elif args.command == "derivs":
        experiments.run_derivs(cfg, args.checkpoints, _data_dir(cfg), out)
    elif args.command == "newton":
        experiments.run_newton(cfg, args.checkpoints, _data_dir(cfg), out)
    elif args.command == "bench":
        experiments.run_bench(cfg, args.checkpoints[0], _data_dir(cfg), out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            run(args)
    except CONFIG_ERRORS as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (CurvatureError, FloatingPointError, np.linalg.LinAlgError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as err:
        print(f"IO failure: {err}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
