"""Command line entry point: `churnsurv <command> [--config PATH] [--seed N] [--out DIR]`."""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import load_config

COMMANDS = ("simulate", "prepare", "train", "predict", "baseline", "evaluate", "run")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="churnsurv", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="run directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("-q", "--quiet", action="store_true", help="do not echo the resolved config")
        if name == "baseline":
            p.add_argument("--kind", choices=["km", "cox"], required=True)
    return parser


def _overrides(args) -> dict[str, str]:
    pairs = {}
    for item in args.set:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    if args.seed is not None:
        pairs["seed"] = str(args.seed)
    if args.out is not None:
        pairs["out"] = args.out
    return pairs


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        if not args.quiet:
            for line in cfg.lines():
                print(f"# {line}", file=sys.stderr)
        if args.command == "baseline":
            lines = pipeline.cmd_baseline(cfg, args.kind)
        elif args.command == "run":
            lines = pipeline.run_all(cfg)
        else:
            lines = getattr(pipeline, f"cmd_{args.command}")(cfg)
    except Exception as exc:  # one parseable line, nonzero exit
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    for line in lines:
        print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
