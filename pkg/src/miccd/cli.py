"""Command-line front end: ``miccd --config cfg.json --stage all``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import ConfigInvalid, MissingArtifact
from .pipeline import STAGES, StageError, run_pipeline

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("miccd")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="miccd",
        description="Simulate, cluster, train, decide and evaluate minimum-cost interventions.")
    p.add_argument("--config", metavar="PATH", help="JSON experiment config")
    p.add_argument("--stage", default="all", choices=STAGES + ("all",))
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field by dotted path, e.g. train.epochs=5")
    p.add_argument("--workers", type=int, default=None,
                   help="parallel seed workers (default: logical cores)")
    p.add_argument("--out", metavar="DIR", help="output directory (overrides config 'out')")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    overrides = list(args.overrides)
    if args.out:
        overrides.append(f"out={args.out}")
    try:
        cfg = load_config(args.config, overrides)
    except ConfigInvalid as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.workers is not None and args.workers < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        rep = run_pipeline(cfg, args.stage, args.workers)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING if isinstance(e.cause, MissingArtifact) else EXIT_RUNTIME
    if rep is not None:
        f1 = rep.f1.get("miccd", {}).get("median", float("nan"))
        nc = rep.n_cost.get("miccd", {}).get("median", float("nan"))
        print(f"{rep.dataset}: MiCCD F1 {f1:.3f}, N-Cost {nc:.3f}; report in {cfg['out']}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
