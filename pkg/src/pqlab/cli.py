"""Command-line entry point ``pqlab``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .solve import compute_example_iv_K

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

_SUBSETS = {
    "audit": ("audit",),
    "approx": ("approx", "diagonal"),
    "solve": ("solve", "regularity", "infinity"),
    "run": None,
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pqlab", description="(p,q)-growth functional toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("audit", "measure assumption constants"),
        ("approx", "frozen-coefficient approximation diagnostics"),
        ("solve", "solve ladder and regularity diagnostics"),
        ("run", "full pipeline"),
    ):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("config", help="key = value experiment file")
        sp.add_argument("--out", help="CSV output path (default: config 'output' or stdout)")
        sp.add_argument("--seed", type=int, help="override the sampling seed")
        sp.add_argument("--parallel", action="store_true", help="run ladder entries concurrently")
    k = sub.add_parser("example-iv-k", help="print the (H5) constant K of the half-plane example")
    k.add_argument("--p", type=float, required=True)
    k.add_argument("--q", type=float, required=True)
    k.add_argument("--m", type=float, required=True, help="max of the coefficient a")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "example-iv-k":
        try:
            print(repr(compute_example_iv_K(args.p, args.q, args.m)))
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        return EXIT_OK
    try:
        cfg = harness.load_config(args.config)
        cfg = harness.with_overrides(cfg, seed=args.seed, parallel=args.parallel, output=args.out)
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    rows = harness.run_experiment(cfg, _SUBSETS[args.command])
    if cfg.output:
        harness.emit_csv(rows, cfg.output)
    else:
        sys.stdout.write(harness.emit_csv(rows))
    failed = [r for r in rows if r.stage == "error"]
    for r in failed:
        print(f"stage error in {r.key}: {r.notes}", file=sys.stderr)
    return EXIT_STAGE if failed else EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
