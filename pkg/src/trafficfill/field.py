"""Spatiotemporal mean-velocity patch grids (500 m x 1 minute)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .snfs import RoadConfig, SampleLog, cells_to_kmh

SEGMENT_LENGTH_M = 500.0
PATCH_MINUTES = 1

OBSERVED, CLASS1, CLASS2 = 0, 1, 2


@dataclass
class PatchGrid:
    """``values[m, t]`` is the mean velocity (km/h) of segment ``m`` in minute
    ``start_minute + t``; NaN marks a missing patch."""

    values: np.ndarray
    start_minute: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("patch grid must be 2-D (segments x minutes)")
        present = self.values[~np.isnan(self.values)]
        if np.any(present <= 0):
            raise ValueError("present mean velocities must be > 0 km/h")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def segments(self) -> int:
        return self.values.shape[0]

    @property
    def minutes(self) -> int:
        return self.values.shape[1]

    @property
    def minute_index(self) -> np.ndarray:
        return self.start_minute + np.arange(self.minutes)

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    def window(self, start: int, stop: int) -> "PatchGrid":
        """Columns for absolute minutes ``start <= minute < stop``."""
        a, b = start - self.start_minute, stop - self.start_minute
        if a < 0 or b > self.minutes or a >= b:
            raise ValueError(f"window [{start}, {stop}) outside grid minutes "
                             f"[{self.start_minute}, {self.start_minute + self.minutes})")
        return PatchGrid(self.values[:, a:b].copy(), start)

    def copy(self) -> "PatchGrid":
        return PatchGrid(self.values.copy(), self.start_minute)


def segment_count(road: RoadConfig) -> int:
    cells_per_segment = int(round(SEGMENT_LENGTH_M / road.cell_length_m))
    if road.length_cells % cells_per_segment:
        raise ValueError(f"road length {road.length_cells} cells is not a whole number of segments")
    return road.length_cells // cells_per_segment


def segment_of_km(km: float, road: RoadConfig) -> int:
    """Index of the 500 m segment containing position ``km``."""
    m = int(np.floor(km * 1000.0 / SEGMENT_LENGTH_M))
    return min(m, segment_count(road) - 1)


def aggregate(log: SampleLog, road: RoadConfig) -> PatchGrid:
    """Arithmetic mean speed over vehicle-step samples per patch, lanes pooled."""
    M = segment_count(road)
    T = log.minutes
    cells_per_segment = road.length_cells // M
    seg = log.cell.astype(np.int64) // cells_per_segment
    minute = log.time_step.astype(np.int64) // log.steps_per_minute
    flat = seg * T + minute
    total = np.bincount(flat, weights=cells_to_kmh(log.velocity.astype(float)), minlength=M * T)
    count = np.bincount(flat, minlength=M * T)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    # a patch where every sample is stopped has mean 0; the grid stores only
    # positive speeds, so report those as the slowest resolvable value
    values = np.where(values == 0.0, 1.0, values)
    return PatchGrid(values.reshape(M, T), log.start_minute)


def free_flow_kmh(road: RoadConfig) -> float:
    return float(np.mean([cells_to_kmh(v) for v in road.speed_limit_per_lane]))


def densify(grid: PatchGrid, road: RoadConfig) -> PatchGrid:
    """Fill empty patches (no vehicles) with the lane-averaged speed limit."""
    values = np.where(np.isnan(grid.values), free_flow_kmh(road), grid.values)
    return PatchGrid(values, grid.start_minute)


@dataclass
class SegmentClassMap:
    """Per-patch class codes plus the counter speed for Class-1 patches."""

    kind: np.ndarray
    counter_kmh: np.ndarray
    degraded: int = 0

    def counts(self) -> dict[str, int]:
        return {
            "observed": int((self.kind == OBSERVED).sum()),
            "class1": int((self.kind == CLASS1).sum()),
            "class2": int((self.kind == CLASS2).sum()),
        }


def classify(grid: PatchGrid, road: RoadConfig,
             counters: Mapping[float, Mapping[int, float]]) -> SegmentClassMap:
    """Label patches Observed / Class1 / Class2.

    Args:
        grid: observed patches.
        road: geometry used to place counters in segments.
        counters: ``{position_km: {minute: speed_kmh}}``.  A missing patch in
            a counter segment is Class1 when that counter has a reading for
            the minute; otherwise it falls back to Class2 and is counted in
            ``degraded``.
    """
    missing = grid.missing
    kind = np.where(missing, CLASS2, OBSERVED).astype(np.int8)
    counter_kmh = np.full(grid.shape, np.nan)
    degraded = 0
    for km, readings in sorted(counters.items()):
        m = segment_of_km(km, road)
        for t, minute in enumerate(grid.minute_index):
            if not missing[m, t] or kind[m, t] == CLASS1:
                continue
            v = readings.get(int(minute))
            if v is None or not np.isfinite(v) or v <= 0:
                degraded += 1
                continue
            kind[m, t] = CLASS1
            counter_kmh[m, t] = v
    return SegmentClassMap(kind, counter_kmh, degraded)


def _fill_1d(row: np.ndarray) -> np.ndarray:
    known = ~np.isnan(row)
    if not known.any():
        return row.copy()
    x = np.arange(len(row))
    # np.interp holds the end values constant outside the known range
    return np.interp(x, x[known], row[known])


def interpolate_bounds(grid: PatchGrid) -> np.ndarray:
    """Upper velocity bound for every patch.

    Missing patches get the mean of a linear interpolation along time (within
    the segment) and one along space (within the minute), or whichever of the
    two exists.  Present patches keep their own value.
    """
    values = grid.values
    if not np.isfinite(values).any():
        raise ValueError("grid has no observed values to interpolate from")
    along_time = np.vstack([_fill_1d(row) for row in values])
    along_space = np.vstack([_fill_1d(col) for col in values.T]).T
    n = (~np.isnan(along_time)).astype(int) + (~np.isnan(along_space)).astype(int)
    both = (np.nan_to_num(along_time) + np.nan_to_num(along_space)) / np.maximum(n, 1)
    # a patch whose whole segment row and minute column are empty has no
    # neighbour on either axis; bound it by the fastest observation instead
    both = np.where(n == 0, np.nanmax(values), both)
    return np.where(np.isnan(values), both, values)


@dataclass(frozen=True)
class MaskSpec:
    threshold_kmh: float = 20.0
    mask_prob_below: float = 0.6
    mask_prob_above: float = 0.05
    noise_sigma_kmh: float = 3.0

    def __post_init__(self):
        for name in ("mask_prob_below", "mask_prob_above"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if self.threshold_kmh <= 0:
            raise ValueError("threshold must be positive")
        if self.noise_sigma_kmh < 0:
            raise ValueError("noise sigma must be >= 0")


def mask_synthetic(grid: PatchGrid, spec: MaskSpec, seed) -> PatchGrid:
    """Noisy, partially masked copy of a complete grid.

    Slow patches (true value below the threshold) are dropped with
    ``mask_prob_below``, the rest with ``mask_prob_above``.
    """
    if np.isnan(grid.values).any():
        raise ValueError("mask_synthetic needs a complete grid")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    truth = grid.values
    noise = rng.normal(0.0, 1.0, truth.shape) * spec.noise_sigma_kmh
    noisy = np.maximum(truth + noise, 1.0)
    prob = np.where(truth < spec.threshold_kmh, spec.mask_prob_below, spec.mask_prob_above)
    drop = rng.random(truth.shape) < prob
    return PatchGrid(np.where(drop, np.nan, noisy), grid.start_minute)
