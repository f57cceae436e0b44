"""Command-line front end: one subcommand per stage plus ``pipeline``.

Exit codes: 0 success, 1 stage failure, 2 missing input or bad usage.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import load_config
from .mechanism import outcome_to_json, reports_from_json, run_mechanism


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--out", default="artifacts", help="artifact directory (default: artifacts)")
    common.add_argument("--input", help="bids CSV to use instead of simulating")
    common.add_argument("--seed", type=_u64)
    common.add_argument("--workers", type=_positive, default=1)
    common.add_argument("--alpha", type=float)
    common.add_argument("--min-joint", type=_positive)
    common.add_argument("--pricing-mode", choices=("cm", "paper"))
    common.add_argument("--meb", type=float)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cmproc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in [*pipeline.STAGES, "pipeline"]:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage" if name != "pipeline" else "run all stages")
    m = sub.add_parser("mechanism", help="evaluate one report profile given as JSON")
    m.add_argument("reports", help="JSON file: [{bidder, cost, coalition: [ids]}]")
    m.add_argument("--t", type=float, default=1.0)
    m.add_argument("--reserve", type=float, default=float("inf"))
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "mechanism":
        path = Path(args.reports)
        if not path.is_file():
            print(f"error: missing input {path}", file=sys.stderr)
            return 2
        out = run_mechanism(reports_from_json(path.read_text()), args.t, args.reserve)
        print(json.dumps(outcome_to_json(out), indent=2))
        return 0
    try:
        cfg = load_config(
            args.config, seed=args.seed, input=args.input, alpha=args.alpha, min_joint=args.min_joint,
            pricing_mode=args.pricing_mode, meb=args.meb,
        )
    except FileNotFoundError as e:
        print(f"error: missing input {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    if cfg.input and not Path(cfg.input).is_file():
        print(f"error: missing input {cfg.input}", file=sys.stderr)
        return 2
    try:
        if args.command == "pipeline":
            pipeline.run_pipeline(cfg, args.out, args.workers)
        else:
            pipeline.run_stage(args.command, cfg, args.out, args.workers)
    except pipeline.MissingInput as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except pipeline.StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
