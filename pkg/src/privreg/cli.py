"""Command-line entry point: privreg <subcommand> --config <path>."""

from __future__ import annotations

import argparse
import sys

from .experiments import COMMANDS, run


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="privreg",
        description="Train, verify, and attack private-SGD mechanisms from a JSON config.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    help_by_command = {
        "train": "train one model per the config and record losses",
        "verify": "run every statistical and algebraic identity check",
        "attack": "run the gradient-leakage sweep over mechanisms",
        "moments": "run the Gaussian moment and product-density checks",
        "report": "aggregate result CSVs into a summary table",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=help_by_command[name])
        p.add_argument("--config", required=True, help="path to the JSON config")
        p.add_argument("--out", default=None,
                       help="output directory (overrides $PRIVREG_OUT and the config)")
        p.add_argument("--seed", type=int, default=None,
                       help="override every seed in the config")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return run(args.command, args.config, out_dir=args.out, seed_override=args.seed)


if __name__ == "__main__":
    sys.exit(main())
