"""Scenario grids, ensemble simulation, the per-minute imputation pipeline,
the synthetic twin and MAE scoring."""

from __future__ import annotations

import itertools
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import seeding
from .assimilation import (LikelihoodConfig, ParticleEnsemble, Posterior, ScenarioSet,
                           assimilate_window, lattice_coords, map_index)
from .field import (CLASS1, MaskSpec, PatchGrid, aggregate, classify, densify,
                    interpolate_bounds, mask_synthetic, segment_count)
from .priors import U_MIN_KMH, PriorSpec
from .snfs import InflowSchedule, ModelParams, RoadConfig, run_scenario

log = logging.getLogger(__name__)

DIMENSIONS = ("p_bn", "p", "q", "r")


class DataError(ValueError):
    """Input data that cannot drive the pipeline."""


@dataclass(frozen=True)
class Axis:
    lower: float
    upper: float
    increment: float

    def values(self) -> list[float]:
        if self.increment <= 0:
            if self.lower == self.upper:
                return [round(self.lower, 6)]
            raise ValueError("increment must be positive")
        span = (self.upper - self.lower) / self.increment
        n = int(round(span))
        if n < 0 or abs(span - n) > 1e-9:
            raise ValueError(f"[{self.lower}, {self.upper}] is not a whole number of "
                             f"{self.increment} steps")
        return [round(self.lower + k * self.increment, 6) for k in range(n + 1)]


@dataclass(frozen=True)
class GridSpec:
    p_bn: Axis = Axis(0.26, 0.54, 0.02)
    p: Axis = Axis(0.06, 0.24, 0.03)
    q: Axis = Axis(0.06, 0.24, 0.03)
    r: Axis = Axis(0.90, 0.99, 0.01)

    def axes(self) -> list[Axis]:
        return [getattr(self, d) for d in DIMENSIONS]


FULL_GRID = GridSpec()
CI_GRID = GridSpec(
    p_bn=Axis(0.26, 0.54, 0.07),
    p=Axis(0.06, 0.24, 0.09),
    q=Axis(0.06, 0.24, 0.09),
    r=Axis(0.90, 0.99, 0.03),
)
GRID_PRESETS = {"full": FULL_GRID, "ci": CI_GRID}


def build_scenario_grid(spec: GridSpec = FULL_GRID) -> list[ModelParams]:
    """Cartesian product of the four lattices, ``p_bn`` varying slowest."""
    return [ModelParams(*v) for v in itertools.product(*(a.values() for a in spec.axes()))]


def on_lattice(theta: ModelParams, spec: GridSpec) -> bool:
    return all(round(getattr(theta, d), 6) in a.values() for d, a in zip(DIMENSIONS, spec.axes()))


def simulate_one(road: RoadConfig, params: ModelParams, inflow: InflowSchedule, start: int,
                 minutes: int, warmup: int, seed) -> tuple[np.ndarray, list[str]]:
    """Densified grid of one run over ``[start, start + minutes)``, warmup dropped."""
    first = start - warmup
    log_ = run_scenario(road, params, inflow, warmup + minutes, seed, start_minute=first)
    grid = densify(aggregate(log_, road), road)
    return grid.values[:, warmup:], log_.warnings


def simulate_ensemble(grid: Sequence[ModelParams], road: RoadConfig, inflow: InflowSchedule,
                      window: tuple[int, int], warmup: int, seed: int,
                      workers: int | None = None) -> ScenarioSet:
    """Simulate every parameter set over ``window = (start_minute, minutes)``.

    Each run starts on an empty road ``warmup`` minutes before the window and
    uses its own generator seeded from ``(seed, scenario index)``, so results
    do not depend on thread scheduling.
    """
    start, minutes = window
    grid = list(grid)
    if not inflow.covers(start - warmup, start + minutes):
        raise DataError(f"inflow does not cover minutes [{start - warmup}, {start + minutes})")
    M = segment_count(road)
    if not grid:
        return ScenarioSet([], np.zeros((0, M, minutes)), start)

    def job(n):
        return simulate_one(road, grid[n], inflow, start, minutes, warmup,
                            seeding.derive_seed(seed, seeding.SCENARIO, n))

    workers = workers or min(len(grid), os.cpu_count() or 1)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(job, range(len(grid))))
    else:
        results = [job(n) for n in range(len(grid))]
    warnings = [f"scenario {n}: {w}" for n, (_, ws) in enumerate(results) for w in ws]
    grids = np.stack([g for g, _ in results])
    return ScenarioSet(grid, grids, start, lattice_coords(grid), warnings)


def impute(obs: PatchGrid, best: PatchGrid) -> PatchGrid:
    """Fill the missing patches of ``obs`` from ``best`` at the same (m, t)."""
    if obs.shape != best.shape:
        raise ValueError(f"shape mismatch: {obs.shape} vs {best.shape}")
    return PatchGrid(np.where(obs.missing, best.values, obs.values), obs.start_minute)


@dataclass
class CounterTable:
    """Per-minute counter records (possibly several positions)."""

    position_km: np.ndarray
    minute: np.ndarray
    count: np.ndarray
    speed_kmh: np.ndarray

    def __post_init__(self):
        self.position_km = np.asarray(self.position_km, dtype=float)
        self.minute = np.asarray(self.minute, dtype=np.int64)
        self.count = np.asarray(self.count, dtype=np.int64)
        self.speed_kmh = np.asarray(self.speed_kmh, dtype=float)

    def __len__(self):
        return len(self.minute)

    def at(self, km: float) -> np.ndarray:
        return np.isclose(self.position_km, km, atol=1e-9)

    def inflow(self, origin_km: float = 0.0) -> InflowSchedule:
        sel = self.at(origin_km)
        if not sel.any():
            raise DataError(f"no counter records at {origin_km} km for the inflow boundary")
        speed = np.where(self.speed_kmh[sel] > 0, self.speed_kmh[sel], 1.0)
        return InflowSchedule(self.minute[sel], self.count[sel], speed)

    def speeds(self, positions_km: Sequence[float]) -> dict[float, dict[int, float]]:
        out = {}
        for km in positions_km:
            sel = self.at(km) & np.isfinite(self.speed_kmh)
            out[float(km)] = {int(m): float(v) for m, v in zip(self.minute[sel], self.speed_kmh[sel])}
        return out


@dataclass
class PipelineConfig:
    road: RoadConfig
    grid: GridSpec = CI_GRID
    window_minutes: int = 30
    cadence_minutes: int = 1
    warmup_minutes: int = 10
    seed: int = 0
    origin_km: float = 0.0
    holdout_counters_km: tuple[float, ...] = ()
    likelihood: LikelihoodConfig = LikelihoodConfig()
    workers: int | None = None

    def __post_init__(self):
        if self.window_minutes < 1 or self.cadence_minutes < 1:
            raise ValueError("window and cadence must be >= 1 minute")
        if self.warmup_minutes < 0:
            raise ValueError("warmup must be >= 0")

    @property
    def prior_counters_km(self) -> list[float]:
        held = [float(k) for k in self.holdout_counters_km]
        return [km for km in self.road.counter_positions_km
                if not any(abs(km - h) < 1e-9 for h in held) and abs(km - self.origin_km) > 1e-9]


@dataclass
class MinuteResult:
    minute: int
    map_params: ModelParams
    map_index: int
    histogram: np.ndarray
    imputed: PatchGrid
    skipped: bool = False


@dataclass
class PipelineResult:
    imputed: PatchGrid
    steps: list[MinuteResult]
    scenarios: ScenarioSet
    warnings: list[str] = field(default_factory=list)

    @property
    def map_trace(self) -> list[tuple[int, ModelParams]]:
        return [(s.minute, s.map_params) for s in self.steps]


def build_priors(window: PatchGrid, classes, sigma_a: float) -> dict[tuple[int, int], PriorSpec]:
    """Prior for every missing patch; the upper bound comes from interpolation."""
    u_max = np.maximum(interpolate_bounds(window), U_MIN_KMH + 1.0)
    priors = {}
    for m, t in zip(*np.nonzero(window.missing)):
        hi = float(u_max[m, t])
        if classes.kind[m, t] == CLASS1:
            priors[(int(m), int(t))] = PriorSpec.class1(classes.counter_kmh[m, t], hi, sigma_a=sigma_a)
        else:
            priors[(int(m), int(t))] = PriorSpec.class2(hi)
    return priors


def run_pipeline(obs: PatchGrid, counters: CounterTable, cfg: PipelineConfig,
                 scenarios: ScenarioSet | None = None) -> PipelineResult:
    """Impute a stream of observed patches minute by minute.

    For each window end (every ``cadence`` minutes once a full window is
    available) the trailing window is classified, priors are built, the
    particle filter runs over the window and every missing patch of the
    window is filled from the current MAP scenario.  Later windows overwrite
    earlier fills.  The filter carries its particles from window to window.

    Scenario runs are continuous from ``warmup`` minutes before the stream,
    so each window is a slice of one run per scenario; pass ``scenarios`` to
    reuse an ensemble built with the same settings.
    """
    road = cfg.road
    W = cfg.window_minutes
    if obs.segments != segment_count(road):
        raise DataError(f"observations have {obs.segments} segments, road has {segment_count(road)}")
    if obs.minutes < W:
        raise DataError(f"need at least {W} minutes of observations, got {obs.minutes}")
    inflow = counters.inflow(cfg.origin_km)
    first = obs.start_minute - cfg.warmup_minutes
    stop = obs.start_minute + obs.minutes
    lacking = [m for m in range(first, stop) if not inflow.covers(m, m + 1)]
    if lacking:
        raise DataError(f"inflow counter at {cfg.origin_km} km lacks minutes "
                        f"{lacking[0]}..{lacking[-1]} ({len(lacking)} missing)")
    if scenarios is None:
        params = build_scenario_grid(cfg.grid)
        scenarios = simulate_ensemble(params, road, inflow, (obs.start_minute, obs.minutes),
                                      cfg.warmup_minutes, cfg.seed, cfg.workers)
    warnings = list(scenarios.warnings)
    speeds = counters.speeds(cfg.prior_counters_km)
    ens = ParticleEnsemble.uniform(len(scenarios))
    out = obs.values.copy()
    steps = []
    for end in range(obs.start_minute + W - 1, stop, cfg.cadence_minutes):
        window = obs.window(end - W + 1, end + 1)
        classes = classify(window, road, speeds)
        if classes.degraded:
            warnings.append(f"minute {end}: {classes.degraded} counter patches without readings "
                            "treated as class 2")
        skipped = not np.isfinite(window.values).any()
        if skipped:
            warnings.append(f"minute {end}: window has no observations, filter not updated")
        else:
            priors = build_priors(window, classes, cfg.likelihood.sigma_a)
            rng = seeding.derive_rng(cfg.seed, seeding.FILTER, end)
            _, ens = assimilate_window(window, classes, priors, scenarios, ens, rng, cfg.likelihood)
        k = map_index(ens, scenarios)
        best = PatchGrid(scenarios.window(window.start_minute, end + 1)[k], window.start_minute)
        filled = impute(window, best)
        a = window.start_minute - obs.start_minute
        out[:, a:a + W] = np.where(window.missing, filled.values, out[:, a:a + W])
        steps.append(MinuteResult(end, scenarios.params[k], k, ens.counts.copy(), filled, skipped))
    return PipelineResult(PatchGrid(out, obs.start_minute), steps, scenarios, warnings)


# ---------------------------------------------------------------------------
# synthetic twin

def demand_ramp(minutes: int, base_vpm: int, peak_vpm: int, ramp_minutes: int,
                speed_kmh: float) -> InflowSchedule:
    """Flat ``base`` demand, linear rise to ``peak`` over ``ramp_minutes``, then flat."""
    t = np.arange(minutes)
    frac = np.clip(t / max(ramp_minutes, 1), 0.0, 1.0)
    count = np.floor(base_vpm + (peak_vpm - base_vpm) * frac + 0.5).astype(np.int64)
    return InflowSchedule(t, count, np.full(minutes, float(speed_kmh)))


@dataclass
class TwinData:
    truth: PatchGrid
    obs: PatchGrid
    counters: CounterTable
    theta: ModelParams


def virtual_counters(log_, road: RoadConfig, positions_km: Sequence[float]):
    """Per-minute readings of point sensors placed in the given cells.

    Speed is the mean over samples sitting in the sensor cell, count is the
    number of vehicles crossing it.  Minutes without samples give no row.
    """
    rows = []
    minute = log_.minute
    for km in positions_km:
        cell = min(int(np.floor(km * 1000.0 / road.cell_length_m)), road.length_cells - 1)
        here = log_.cell == cell
        crossed = (log_.cell - log_.velocity < cell) & (log_.cell >= cell)
        for m in range(log_.start_minute, log_.start_minute + log_.minutes):
            at_m = minute == m
            sel = here & at_m
            if not sel.any():
                continue
            speed = float(np.mean(log_.velocity[sel]) * 20.0)
            if speed <= 0:
                continue
            rows.append((float(km), m, int((crossed & at_m).sum()), speed))
    return rows


def synth_twin(road: RoadConfig, theta: ModelParams, demand: InflowSchedule, mask: MaskSpec,
               seed: int, observe_from: int = 10) -> TwinData:
    """Simulate a ground truth with ``theta`` and derive what sensors would see.

    The truth run covers every demand minute; the observed stream starts at
    ``observe_from`` so the pipeline has inflow history for its warmup.
    """
    minutes = len(demand)
    start = int(demand.minute[0])
    log_ = run_scenario(road, theta, demand, minutes, seeding.derive_seed(seed, seeding.TRUTH),
                        start_minute=start)
    full = densify(aggregate(log_, road), road)
    truth = full.window(start + observe_from, start + minutes)
    obs = mask_synthetic(truth, mask, seeding.derive_rng(seed, seeding.MASK))
    rows = [(0.0, int(m), int(c), float(s)) for m, c, s in
            zip(demand.minute, demand.count, demand.speed_kmh)]
    rows += virtual_counters(log_, road, [k for k in road.counter_positions_km if k > 0])
    rows.sort(key=lambda r: (r[1], r[0]))
    cols = list(zip(*rows))
    counters = CounterTable(*cols)
    return TwinData(truth, obs, counters, theta)


# ---------------------------------------------------------------------------
# scoring

@dataclass
class EvalReport:
    mae_missing: float
    mae_observed: float
    n_missing: int
    n_observed: int

    @property
    def gap(self) -> float:
        return self.mae_missing - self.mae_observed


def evaluate_mae(imputed: PatchGrid, reference: PatchGrid, missing: np.ndarray) -> EvalReport:
    """MAE against the reference, split by whether a patch was originally missing.

    Patches absent from the reference (NaN) are not scored, so a reference
    holding one counter segment scores just that segment.
    """
    if imputed.shape != reference.shape or imputed.shape != np.shape(missing):
        raise ValueError("imputed, reference and mask must share one shape")
    scored = np.isfinite(reference.values) & np.isfinite(imputed.values)
    if not scored.any():
        raise DataError("empty evaluation set")
    err = np.abs(imputed.values - reference.values)
    sel_m = scored & missing
    sel_o = scored & ~missing
    mae_m = float(err[sel_m].mean()) if sel_m.any() else float("nan")
    mae_o = float(err[sel_o].mean()) if sel_o.any() else float("nan")
    return EvalReport(mae_m, mae_o, int(sel_m.sum()), int(sel_o.sum()))
