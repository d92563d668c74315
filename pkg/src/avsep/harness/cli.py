"""Command-line entry point: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import json
import sys

from .config import ExperimentConfig
from .pipeline import STAGES
from .report import stage_report

ALL_COMMANDS = list(STAGES) + ["report"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avsep",
        description="Active binaural source separation: synthetic world, "
        "separator pretraining, policy training, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ALL_COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--preset", choices=("paper", "desk"), default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--workers", type=int, default=None)
    return parser


def load_config(args) -> ExperimentConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.preset is not None:
        overrides["preset"] = args.preset
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.config:
        return ExperimentConfig.load(args.config, **overrides)
    return ExperimentConfig(**overrides) if overrides else ExperimentConfig()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args)
    stage = stage_report if args.command == "report" else STAGES[args.command]
    result = stage(cfg)
    json.dump(result, sys.stdout, indent=1, default=str)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
