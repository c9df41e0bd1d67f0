"""Command line entry point: ``lpr run`` and ``lpr grid``.

Exit codes: 0 success, 2 config error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, ExperimentConfig, load_config
from .experiment import GRID_AXES, run_experiment, run_grid

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3

log = logging.getLogger("lpr")


def _split(text: str) -> list:
    return [v.strip() for v in text.split(",") if v.strip()]


def _grid_value(axis: str, raw: str):
    if axis == "latent_dim":
        return int(raw)
    if axis == "reg_strength":
        return float(raw)
    return raw


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lpr", description="Latent prototype routing experiments on a toy MoE.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("-c", "--config", help="JSON config file (omitted keys take defaults)")
        sp.add_argument("-o", "--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--eval-every", type=int, help="override eval_every")
        sp.add_argument("--steps", type=int, help="override steps")
        sp.add_argument("-v", "--verbose", action="store_true", help="log every evaluation row")

    run = sub.add_parser("run", help="train one configuration")
    common(run)

    grid = sub.add_parser("grid", help="sweep one ablation axis")
    common(grid)
    grid.add_argument("--axis", required=True, choices=GRID_AXES)
    grid.add_argument("--values", required=True, help="comma-separated axis values, e.g. 0.0,0.01 or 32-4,64-1-noreg")
    grid.add_argument("--seeds", help="comma-separated seeds shared by every cell (default: the config seed)")
    return p


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    overrides = {k: v for k, v in (("seed", args.seed), ("eval_every", args.eval_every), ("steps", args.steps)) if v is not None}
    return cfg.replace(**overrides) if overrides else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _load(args)
        if args.command == "grid":
            values = [_grid_value(args.axis, v) for v in _split(args.values)]
            seeds = [int(s) for s in _split(args.seeds)] if args.seeds else None
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "run":
        def show(row):
            log.info("step %d  test_loss %.5f  gini %.4f  min_max %.4f", row.step, row.test_loss, row.gini_hard, row.min_max_hard)

        summary = run_experiment(cfg, args.out, on_row=show)
        if not summary.ok:
            print(f"diverged: {summary.error}", file=sys.stderr)
            return EXIT_DIVERGED
        f = summary.final
        print(f"{summary.config_hash}  test_loss {f.test_loss:.5f}  gini {f.gini_hard:.4f}  min_max {f.min_max_hard:.4f}")
        return EXIT_OK

    try:
        rows = run_grid(cfg, args.axis, values, seeds, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for r in rows:
        print(f"{r.axis}={r.value}  test_loss {r.test_loss:.5f}  gini {r.gini_hard:.4f}  min_max {r.min_max_hard:.4f}"
              + (f"  diverged {r.diverged}" if r.diverged else ""))
    return EXIT_DIVERGED if any(r.diverged for r in rows) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
