"""Command-line front end.

    trafficfill simulate --config road.ini --theta 0.54,0.15,0.15,0.96 --out DIR
    trafficfill twin     --config road.ini --out DIR
    trafficfill impute   --config road.ini --obs obs.csv --counters counters.csv --out DIR
    trafficfill eval     --imputed imputed.csv --reference truth.csv --out DIR

Exit status: 0 success, 1 usage error, 2 data/validation error, 3 internal error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import seeding
from .field import PatchGrid, aggregate, segment_count
from .formats import (SchemaError, load_config, read_counters, read_inflow, read_patches,
                      write_counters, write_eval, write_heatmap, write_inflow, write_patches,
                      write_posterior)
from .imputation import (GRID_PRESETS, DataError, evaluate_mae, on_lattice, run_pipeline,
                         synth_twin)
from .snfs import ModelParams, run_scenario

log = logging.getLogger("trafficfill")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory {out}: {e}") from None
    return out


def _config(args):
    if not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.pipeline.seed = args.seed
    if args.grid is not None:
        cfg.grid = GRID_PRESETS[args.grid]
        cfg.pipeline.grid = cfg.grid
    return cfg


def _input(path, what):
    if not Path(path).is_file():
        raise UsageError(f"{what} file not found: {path}")
    return path


def cmd_simulate(args) -> int:
    cfg = _config(args)
    try:
        theta = ModelParams(*[float(x) for x in args.theta.split(",")])
    except (TypeError, ValueError) as e:
        raise DataError(f"bad --theta {args.theta!r}: {e}") from None
    if args.strict_grid and not on_lattice(theta, cfg.grid):
        raise DataError(f"theta {theta.as_tuple()} is not on the configured parameter lattice")
    inflow = read_inflow(_input(args.inflow, "inflow")) if args.inflow else cfg.twin.demand()
    minutes = args.minutes or len(inflow)
    start = int(inflow.minute.min())
    if not inflow.covers(start, start + minutes):
        raise DataError(f"inflow does not cover {minutes} minutes from minute {start}")
    out = _out_dir(args.out)
    log_ = run_scenario(cfg.road, theta, inflow, minutes,
                        seeding.derive_seed(cfg.pipeline.seed, seeding.TRUTH), start_minute=start)
    grid = aggregate(log_, cfg.road)
    write_patches(out / "patches.csv", grid)
    write_heatmap(out / "patches.pgm", grid, cfg.road.max_speed_kmh)
    _summary(out, [f"vehicles injected {log_.injected}, exited {log_.exited}",
                   f"patches {grid.segments} x {grid.minutes}, empty {int(grid.missing.sum())}",
                   *log_.warnings])
    return EXIT_OK


def cmd_twin(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out)
    tw = cfg.twin
    data = synth_twin(cfg.road, tw.theta, tw.demand(), tw.mask, cfg.pipeline.seed, tw.observe_from)
    write_patches(out / "truth.csv", data.truth)
    write_patches(out / "obs.csv", data.obs)
    write_counters(out / "counters.csv", data.counters)
    write_inflow(out / "inflow.csv", tw.demand())
    vmax = cfg.road.max_speed_kmh
    write_heatmap(out / "truth.pgm", data.truth, vmax)
    write_heatmap(out / "obs.pgm", data.obs, vmax)
    slow = data.truth.values < tw.mask.threshold_kmh
    lines = [f"theta* = {tw.theta.as_tuple()}",
             f"missing patches {int(data.obs.missing.sum())} of {data.obs.missing.size}",
             f"missing among slow patches {data.obs.missing[slow].mean() if slow.any() else 0:.3f}"]
    _summary(out, lines)
    return EXIT_OK


def cmd_impute(args) -> int:
    cfg = _config(args)
    obs, _ = read_patches(_input(args.obs, "observation"), segment_count(cfg.road))
    counters = read_counters(_input(args.counters, "counters"))
    out = _out_dir(args.out)
    result = run_pipeline(obs, counters, cfg.pipeline)
    write_patches(out / "imputed.csv", result.imputed, obs.missing)
    write_posterior(out / "posterior.csv", result)
    vmax = cfg.road.max_speed_kmh
    write_heatmap(out / "observed.pgm", obs, vmax)
    write_heatmap(out / "imputed.pgm", result.imputed, vmax)
    last = result.steps[-1]
    write_heatmap(out / "map_scenario.pgm", result.scenarios.grid(last.map_index), vmax)
    lines = [f"scenarios {len(result.scenarios)}, MAP updates {len(result.steps)}",
             f"final MAP (p_bn, p, q, r) = {last.map_params.as_tuple()} at minute {last.minute}",
             f"imputed patches {int(obs.missing.sum())}",
             *result.warnings]
    _summary(out, lines)
    return EXIT_OK


def cmd_eval(args) -> int:
    imputed, flags = read_patches(_input(args.imputed, "imputed"))
    reference, _ = read_patches(_input(args.reference, "reference"), imputed.segments)
    if args.obs:
        obs, _ = read_patches(_input(args.obs, "observation"), imputed.segments)
        flags = obs.missing
    if flags is None:
        raise DataError("imputed CSV has no 'imputed' column; pass --obs to mark missing patches")
    ref = _align(reference, imputed)
    report = evaluate_mae(imputed, ref, flags)
    out = _out_dir(args.out)
    write_eval(out / "eval.csv", report)
    text = (
        f"{'':<10}{'MAE missing (imputed)':>24}{'MAE non-missing (observed)':>30}\n"
        f"{'twin':<10}{report.mae_missing:>19.2f} km/h{report.mae_observed:>25.2f} km/h\n"
        f"patches scored: {report.n_missing} missing, {report.n_observed} non-missing; "
        f"gap {report.gap:+.2f} km/h\n"
    )
    sys.stdout.write(text)
    (out / "eval.txt").write_text(text)
    return EXIT_OK


def _align(reference: PatchGrid, like: PatchGrid) -> PatchGrid:
    """Reference values on the grid of ``like`` (NaN where it has none)."""
    values = np.full(like.shape, np.nan)
    a = max(like.start_minute, reference.start_minute)
    b = min(like.start_minute + like.minutes, reference.start_minute + reference.minutes)
    if a < b:
        values[:, a - like.start_minute:b - like.start_minute] = \
            reference.values[:, a - reference.start_minute:b - reference.start_minute]
    return PatchGrid(values, like.start_minute)


def _summary(out: Path, lines) -> None:
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text)
    sys.stderr.write(text)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trafficfill", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="INI run configuration")
            p.add_argument("--seed", type=int, help="override [pipeline] seed")
            p.add_argument("--grid", choices=sorted(GRID_PRESETS), help="parameter grid preset")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("simulate", help="simulate one scenario to patches CSV + PGM")
    common(p)
    p.add_argument("--theta", required=True, help="p_bn,p,q,r")
    p.add_argument("--inflow", help="inflow CSV (default: [twin] demand ramp)")
    p.add_argument("--minutes", type=int)
    p.add_argument("--strict-grid", action="store_true", help="reject theta off the lattice")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("twin", help="synthesize truth / masked observations / counters")
    common(p)
    p.set_defaults(func=cmd_twin)

    p = sub.add_parser("impute", help="run the imputation pipeline")
    common(p)
    p.add_argument("--obs", required=True)
    p.add_argument("--counters", required=True)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("eval", help="score imputed patches against a reference")
    common(p, config=False)
    p.add_argument("--imputed", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--obs", help="original observations (if imputed CSV lacks flags)")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        sys.stderr.write(f"trafficfill: usage error: {e}\n")
        return EXIT_USAGE
    except (DataError, SchemaError, ValueError, KeyError) as e:
        sys.stderr.write(f"trafficfill: error: {e}\n")
        return EXIT_DATA
    except OSError as e:
        sys.stderr.write(f"trafficfill: error: {e}\n")
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001
        sys.stderr.write(f"trafficfill: internal error: {type(e).__name__}: {e}\n")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
