"""CSV schemas, PGM heatmaps and the INI run configuration."""

from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .assimilation import LikelihoodConfig
from .field import MaskSpec, PatchGrid
from .imputation import (CI_GRID, DIMENSIONS, GRID_PRESETS, Axis, CounterTable, DataError,
                         EvalReport, GridSpec, PipelineConfig, PipelineResult, demand_ramp)
from .snfs import InflowSchedule, ModelParams, RoadConfig

PATCH_HEADER = ["minute", "segment", "mean_velocity_kmh"]
IMPUTED_HEADER = PATCH_HEADER + ["imputed"]
COUNTER_HEADER = ["minute", "position_km", "count", "speed_kmh"]
INFLOW_HEADER = ["minute", "count", "speed_kmh"]
POSTERIOR_HEADER = ["minute", "p_bn", "p", "q", "r", "particle_count"]
EVAL_HEADER = ["mae_missing_kmh", "mae_observed_kmh", "n_missing", "n_observed"]


class SchemaError(DataError):
    pass


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def _writer(path):
    fh = open(path, "w", newline="")
    return fh, csv.writer(fh, lineterminator="\n")


def _rows(path, header: list[str], optional: Iterable[str] = ()):
    """Yield ``(line_number, {column: text})`` after checking the header."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            got = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected header {','.join(header)}")
        got = [h.strip() for h in got]
        allowed = set(header) | set(optional)
        if got[: len(header)] != header or not set(got) <= allowed:
            raise SchemaError(f"{path}: header {','.join(got)!r}, expected {','.join(header)!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(got):
                raise SchemaError(f"{path}:{lineno}: expected {len(got)} fields, got {len(row)}")
            yield lineno, dict(zip(got, (c.strip() for c in row)))


def _num(path, lineno, col, text, kind=float, allow_empty=False):
    if text == "" and allow_empty:
        return None
    try:
        value = kind(text)
    except ValueError:
        raise SchemaError(f"{path}:{lineno}: column {col!r}: cannot parse {text!r}") from None
    if kind is float and not math.isfinite(value):
        raise SchemaError(f"{path}:{lineno}: column {col!r}: non-finite value")
    return value


# --- patches ---------------------------------------------------------------

def write_patches(path, grid: PatchGrid, imputed: np.ndarray | None = None) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(IMPUTED_HEADER if imputed is not None else PATCH_HEADER)
        for t, minute in enumerate(grid.minute_index):
            for m in range(grid.segments):
                v = grid.values[m, t]
                row = [int(minute), m, "" if np.isnan(v) else _fmt(v)]
                if imputed is not None:
                    row.append(int(bool(imputed[m, t])))
                w.writerow(row)


def read_patches(path, segments: int | None = None) -> tuple[PatchGrid, np.ndarray | None]:
    """Parse a patches CSV; returns the grid and the ``imputed`` flags if present."""
    records = []
    has_flag = False
    for lineno, row in _rows(path, PATCH_HEADER, optional=["imputed"]):
        minute = _num(path, lineno, "minute", row["minute"], int)
        seg = _num(path, lineno, "segment", row["segment"], int)
        v = _num(path, lineno, "mean_velocity_kmh", row["mean_velocity_kmh"], allow_empty=True)
        if seg < 0:
            raise SchemaError(f"{path}:{lineno}: negative segment index")
        if v is not None and v <= 0:
            raise SchemaError(f"{path}:{lineno}: mean velocity must be > 0 km/h")
        flag = 0
        if "imputed" in row:
            has_flag = True
            flag = _num(path, lineno, "imputed", row["imputed"], int)
        records.append((minute, seg, v, flag))
    if not records:
        raise SchemaError(f"{path}: no patch rows")
    minutes = [r[0] for r in records]
    start, stop = min(minutes), max(minutes) + 1
    M = segments if segments is not None else max(r[1] for r in records) + 1
    values = np.full((M, stop - start), np.nan)
    flags = np.zeros((M, stop - start), dtype=bool)
    for minute, seg, v, flag in records:
        if seg >= M:
            raise SchemaError(f"{path}: segment {seg} beyond road ({M} segments)")
        if v is not None:
            values[seg, minute - start] = v
        flags[seg, minute - start] = bool(flag)
    return PatchGrid(values, start), (flags if has_flag else None)


# --- counters / inflow -----------------------------------------------------

def write_counters(path, table: CounterTable) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(COUNTER_HEADER)
        for km, m, c, s in zip(table.position_km, table.minute, table.count, table.speed_kmh):
            w.writerow([int(m), _fmt(km), int(c), _fmt(s)])


def read_counters(path) -> CounterTable:
    cols = ([], [], [], [])
    for lineno, row in _rows(path, COUNTER_HEADER):
        minute = _num(path, lineno, "minute", row["minute"], int)
        km = _num(path, lineno, "position_km", row["position_km"])
        count = _num(path, lineno, "count", row["count"], int)
        speed = _num(path, lineno, "speed_kmh", row["speed_kmh"])
        if count < 0:
            raise SchemaError(f"{path}:{lineno}: negative count {count}")
        if speed < 0:
            raise SchemaError(f"{path}:{lineno}: negative speed {speed} km/h")
        for col, v in zip(cols, (km, minute, count, speed)):
            col.append(v)
    return CounterTable(*cols)


def write_inflow(path, inflow: InflowSchedule) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(INFLOW_HEADER)
        for m, c, s in zip(inflow.minute, inflow.count, inflow.speed_kmh):
            w.writerow([int(m), int(c), _fmt(s)])


def read_inflow(path) -> InflowSchedule:
    cols = ([], [], [])
    for lineno, row in _rows(path, INFLOW_HEADER):
        minute = _num(path, lineno, "minute", row["minute"], int)
        count = _num(path, lineno, "count", row["count"], int)
        speed = _num(path, lineno, "speed_kmh", row["speed_kmh"])
        if count < 0 or speed < 0 or (count > 0 and speed == 0):
            raise SchemaError(f"{path}:{lineno}: invalid inflow record")
        for col, v in zip(cols, (minute, count, speed)):
            col.append(v)
    try:
        return InflowSchedule(*cols)
    except ValueError as e:
        raise SchemaError(f"{path}: {e}") from None


# --- posterior / eval ------------------------------------------------------

def write_posterior(path, result: PipelineResult) -> None:
    """Non-empty histogram rows per minute, then a ``map`` row for that minute."""
    params = result.scenarios.params
    fh, w = _writer(path)
    with fh:
        w.writerow(POSTERIOR_HEADER)
        for s in result.steps:
            for n in np.flatnonzero(s.histogram):
                w.writerow([s.minute, *(_fmt(v) for v in params[n].as_tuple()), int(s.histogram[n])])
            w.writerow([s.minute, *(_fmt(v) for v in s.map_params.as_tuple()), "map"])


def read_posterior(path):
    """Returns ``(histogram_rows, map_rows)`` as lists of tuples."""
    hist, maps = [], []
    for lineno, row in _rows(path, POSTERIOR_HEADER):
        minute = _num(path, lineno, "minute", row["minute"], int)
        theta = tuple(_num(path, lineno, d, row[d]) for d in DIMENSIONS)
        if row["particle_count"] == "map":
            maps.append((minute, theta))
        else:
            hist.append((minute, theta, _num(path, lineno, "particle_count", row["particle_count"], int)))
    return hist, maps


def write_eval(path, report: EvalReport) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(EVAL_HEADER)
        w.writerow([_fmt(report.mae_missing), _fmt(report.mae_observed),
                    report.n_missing, report.n_observed])


def read_eval(path) -> EvalReport:
    rows = list(_rows(path, EVAL_HEADER))
    if len(rows) != 1:
        raise SchemaError(f"{path}: expected exactly one report row")
    lineno, row = rows[0]
    return EvalReport(_num(path, lineno, "mae_missing_kmh", row["mae_missing_kmh"]),
                      _num(path, lineno, "mae_observed_kmh", row["mae_observed_kmh"]),
                      _num(path, lineno, "n_missing", row["n_missing"], int),
                      _num(path, lineno, "n_observed", row["n_observed"], int))


# --- PGM heatmaps ----------------------------------------------------------

def _write_pgm(path, pixels: np.ndarray) -> None:
    # downstream segment on the top row, time running left to right
    rows = pixels[::-1]
    with open(path, "w", newline="\n") as fh:
        fh.write(f"P2\n{rows.shape[1]} {rows.shape[0]}\n255\n")
        for r in rows:
            fh.write(" ".join(str(int(p)) for p in r) + "\n")


def write_heatmap(path, grid: PatchGrid, max_kmh: float) -> Path:
    """Velocity heatmap plus ``<name>_mask.pgm`` (255 where a patch is missing)."""
    path = Path(path)
    v = np.nan_to_num(grid.values, nan=0.0)
    pixels = np.clip(np.floor(255.0 * v / max_kmh + 0.5), 0, 255).astype(int)
    _write_pgm(path, pixels)
    mask_path = path.with_name(path.stem + "_mask.pgm")
    _write_pgm(mask_path, np.where(grid.missing, 255, 0))
    return mask_path


def read_pgm(path) -> np.ndarray:
    """Pixel rows as written (top row first)."""
    tokens = Path(path).read_text().split()
    if tokens[0] != "P2":
        raise SchemaError(f"{path}: not a plain PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.array([int(t) for t in tokens[4:]])
    if data.size != w * h or data.max(initial=0) > maxval:
        raise SchemaError(f"{path}: malformed pixel data")
    return data.reshape(h, w)


# --- run configuration -----------------------------------------------------

@dataclass
class TwinSettings:
    theta: ModelParams = ModelParams(0.54, 0.15, 0.15, 0.96)
    minutes: int = 70
    observe_from: int = 10
    demand_base_vpm: int = 30
    demand_peak_vpm: int = 50
    ramp_minutes: int = 60
    inflow_speed_kmh: float = 80.0
    mask: MaskSpec = field(default_factory=MaskSpec)

    def demand(self) -> InflowSchedule:
        return demand_ramp(self.minutes, self.demand_base_vpm, self.demand_peak_vpm,
                           self.ramp_minutes, self.inflow_speed_kmh)


@dataclass
class RunConfig:
    road: RoadConfig
    grid: GridSpec
    pipeline: PipelineConfig
    twin: TwinSettings


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(";", ",").split(",") if x.strip()]


def load_config(path) -> RunConfig:
    """Parse an INI run configuration; raises SchemaError on bad content."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except configparser.Error as e:
        raise SchemaError(f"{path}: {e}") from None
    try:
        return _parse(cp)
    except (KeyError, ValueError) as e:
        if isinstance(e, SchemaError):
            raise
        raise SchemaError(f"{path}: {e}") from None


def _parse(cp: configparser.ConfigParser) -> RunConfig:
    if "road" not in cp:
        raise SchemaError("missing [road] section")
    rd = cp["road"]
    lanes = rd.getint("lanes")
    fast = rd.getfloat("fast_limit_kmh")
    slow = rd.getfloat("slow_limit_kmh", fallback=fast)
    road = RoadConfig.from_km(
        rd.getfloat("length_km"),
        [slow] * (lanes - 1) + [fast],
        (rd.getfloat("bottleneck_start_km", fallback=0.0), rd.getfloat("bottleneck_end_km", fallback=0.0)),
        _floats(rd.get("counters_km", fallback="")),
    )

    grid = CI_GRID
    if "grid" in cp:
        g = cp["grid"]
        if "preset" in g:
            if g["preset"] not in GRID_PRESETS:
                raise SchemaError(f"unknown grid preset {g['preset']!r}")
            grid = GRID_PRESETS[g["preset"]]
        axes = {}
        for d in DIMENSIONS:
            if d in g:
                lo, hi, step = _floats(g[d])
                axes[d] = Axis(lo, hi, step)
        grid = GridSpec(**{d: axes.get(d, getattr(grid, d)) for d in DIMENSIONS})
        for a in grid.axes():
            a.values()

    pl = cp["pipeline"] if "pipeline" in cp else {}
    get = (lambda k, f, conv: conv(pl[k]) if k in pl else f)
    pipeline = PipelineConfig(
        road=road,
        grid=grid,
        window_minutes=get("window", 30, int),
        cadence_minutes=get("cadence", 1, int),
        warmup_minutes=get("warmup", 10, int),
        seed=get("seed", 0, int),
        origin_km=get("origin_km", 0.0, float),
        holdout_counters_km=tuple(get("holdout_counters_km", [], _floats)),
        likelihood=LikelihoodConfig(get("sigma_p", 20.0, float), get("sigma_a_kmh", 10.0, float)),
    )

    twin = TwinSettings()
    if "twin" in cp:
        tw = cp["twin"]
        theta = ModelParams(*_floats(tw["theta"])) if "theta" in tw else twin.theta
        twin = TwinSettings(
            theta=theta,
            minutes=tw.getint("minutes", twin.minutes),
            observe_from=tw.getint("observe_from", pipeline.warmup_minutes),
            demand_base_vpm=tw.getint("demand_base_vpm", twin.demand_base_vpm),
            demand_peak_vpm=tw.getint("demand_peak_vpm", twin.demand_peak_vpm),
            ramp_minutes=tw.getint("ramp_minutes", twin.ramp_minutes),
            inflow_speed_kmh=tw.getfloat("inflow_speed_kmh", twin.inflow_speed_kmh),
            mask=MaskSpec(
                tw.getfloat("mask_threshold_kmh", twin.mask.threshold_kmh),
                tw.getfloat("mask_prob_below", twin.mask.mask_prob_below),
                tw.getfloat("mask_prob_above", twin.mask.mask_prob_above),
                tw.getfloat("noise_sigma_kmh", twin.mask.noise_sigma_kmh),
            ),
        )
    return RunConfig(road, grid, pipeline, twin)
