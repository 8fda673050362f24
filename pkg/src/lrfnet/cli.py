"""Command line entry point: ``lrfnet {train,compare,surface,condtrace}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError
from .harness import (
    export_surface_grid,
    load_config,
    run_experiment,
    surface_total_variation,
)
from .netcore import load_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("lrfnet")


def _bounds(text: str):
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("bounds must be x1min,x1max,x2min,x2max")
    return parts


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="run only this seed")
    common.add_argument("--out-dir", default="out", help="output directory (default: out)")
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors")

    p = argparse.ArgumentParser(prog="lrfnet", description="AdaptiveLRF training and experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (("train", "train the first regularizer of a config (one seed)"),
                       ("compare", "run the full regularizer x seed matrix and write summary.csv"),
                       ("condtrace", "run the matrix and write per-epoch SNCN traces")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("config")
    sp = sub.add_parser("surface", parents=[common], help="export a decision-surface grid")
    sp.add_argument("checkpoint")
    sp.add_argument("--bounds", type=_bounds, default=[-3.0, 3.0, -3.0, 3.0])
    sp.add_argument("--res", type=int, default=200)
    sp.add_argument("--out", default="grid.csv")
    return p


def _run(args) -> int:
    if args.command == "surface":
        net = load_checkpoint(args.checkpoint)
        grid = export_surface_grid(net, args.bounds, args.res, args.out)
        log.info("wrote %d rows to %s (total variation %.6g)", len(grid), args.out,
                 surface_total_variation(grid))
        return EXIT_OK

    cfg = load_config(args.config)
    base = Path(args.config).parent
    if args.command == "train":
        cfg.regularizers = cfg.regularizers[:1]
        seeds = [args.seed if args.seed is not None else cfg.seeds[0]]
    else:
        seeds = [args.seed] if args.seed is not None else None
    results = run_experiment(cfg, args.out_dir, seeds=seeds, base_dir=base)
    for r in results:
        if r.status == "ok":
            m = r.metrics
            log.info("%s seed %d: test acc %s, test loss %s, final SNCN %s", r.label, r.seed,
                     m.get("test_acc"), m.get("test_loss"), m.get("final_sncn"))
    failed = [r for r in results if r.status != "ok"]
    for r in failed:
        log.error("%s seed %d %s", r.label, r.seed, r.status)
    return EXIT_RUNTIME if failed else EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except Exception as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
