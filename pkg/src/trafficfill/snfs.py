"""Multi-lane open-boundary S-NFS cellular automaton.

Vehicles live on a ``lanes x length_cells`` lattice of 10 m cells and move
once every 1.8 s step, so one cell per step is exactly 20 km/h.  Lane 0 is
the leftmost (slow) lane and the highest index is the rightmost (fast) lane.

Each step runs, in this order:

1. admission of arrivals queued at the origin (one draw per admitted vehicle
   to pick a free lane),
2. the lane-change pass (one draw per eligible vehicle),
3. the longitudinal velocity update, lane by lane from lane 0 upwards, each
   lane front-to-back, with three draws per vehicle (quick-start ``s``,
   brake flag, slow-to-start flag),
4. the parallel move, removal of vehicles past the last cell, and sampling.

The hot loops are compiled with numba and take a ``numpy.random.Generator``
so every run is reproducible from its seed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numba
import numpy as np

log = logging.getLogger(__name__)

CELL_LENGTH_M = 10.0
STEP_SECONDS = 1.8
KMH_PER_CELL_STEP = 20.0
STEPS_PER_MINUTE = 33
LANE_CHANGE_PROB = 0.10

# meta vector slots
_N_FREE, _NEXT_VID, _INJECTED, _EXITED, _PENDING, _TIME = range(6)


def kmh_to_cells(v: float) -> int:
    """Nearest whole number of cells per step for ``v`` km/h (never negative)."""
    if v < 0:
        raise ValueError(f"negative velocity {v} km/h")
    return max(0, int(math.floor(v / KMH_PER_CELL_STEP + 0.5)))


def cells_to_kmh(c):
    return KMH_PER_CELL_STEP * c


@dataclass(frozen=True)
class ModelParams:
    """One scenario: bottleneck braking, braking, slow-to-start, anticipation."""

    p_bn: float
    p: float
    q: float
    r: float

    def __post_init__(self):
        for name in ("p_bn", "p", "q", "r"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.p_bn, self.p, self.q, self.r)


@dataclass(frozen=True)
class RoadConfig:
    """Road geometry in cells.

    ``bottleneck_span`` is a half-open ``(start_cell, end_cell)`` range and
    ``speed_limit_per_lane`` is in cells per step, lane 0 first.
    """

    length_cells: int
    lanes: int
    speed_limit_per_lane: tuple[int, ...]
    bottleneck_span: tuple[int, int] = (0, 0)
    counter_positions_km: tuple[float, ...] = ()
    cell_length_m: float = CELL_LENGTH_M
    step_seconds: float = STEP_SECONDS

    def __post_init__(self):
        if self.lanes < 1:
            raise ValueError("need at least one lane")
        if len(self.speed_limit_per_lane) != self.lanes:
            raise ValueError("one speed limit per lane required")
        if min(self.speed_limit_per_lane) < 1:
            raise ValueError("speed limits must be >= 1 cell/step")
        start, end = self.bottleneck_span
        if not (0 <= start <= end <= self.length_cells):
            raise ValueError(f"bottleneck span {self.bottleneck_span} outside the road")
        for km in self.counter_positions_km:
            if not 0 <= km * 1000.0 / self.cell_length_m <= self.length_cells:
                raise ValueError(f"counter at {km} km outside the road")

    @classmethod
    def from_km(cls, length_km, limits_kmh, bottleneck_km=(0.0, 0.0), counters_km=()):
        """Build a road from km / km/h figures (``limits_kmh`` lane 0 first)."""
        cells = int(round(length_km * 1000.0 / CELL_LENGTH_M))
        start = int(round(bottleneck_km[0] * 1000.0 / CELL_LENGTH_M))
        end = int(round(bottleneck_km[1] * 1000.0 / CELL_LENGTH_M))
        return cls(
            length_cells=cells,
            lanes=len(limits_kmh),
            speed_limit_per_lane=tuple(kmh_to_cells(v) for v in limits_kmh),
            bottleneck_span=(start, end),
            counter_positions_km=tuple(float(c) for c in counters_km),
        )

    @property
    def max_speed_kmh(self) -> float:
        return cells_to_kmh(max(self.speed_limit_per_lane))


@dataclass
class InflowSchedule:
    """Per-minute vehicle counts and mean speeds at the origin."""

    minute: np.ndarray
    count: np.ndarray
    speed_kmh: np.ndarray

    def __post_init__(self):
        self.minute = np.asarray(self.minute, dtype=np.int64)
        self.count = np.asarray(self.count, dtype=np.int64)
        self.speed_kmh = np.asarray(self.speed_kmh, dtype=float)
        if np.any(self.count < 0):
            raise ValueError("negative inflow count")
        if np.any((self.count > 0) & ~(self.speed_kmh > 0)):
            raise ValueError("inflow speed must be positive when vehicles arrive")
        if len(np.unique(self.minute)) != len(self.minute):
            raise ValueError("duplicate inflow minutes")
        self._index = {int(m): i for i, m in enumerate(self.minute)}

    def __len__(self):
        return len(self.minute)

    def record(self, minute: int) -> tuple[int, float]:
        i = self._index.get(int(minute))
        if i is None:
            raise KeyError(f"no inflow record for minute {minute}")
        return int(self.count[i]), float(self.speed_kmh[i])

    def covers(self, start: int, stop: int) -> bool:
        return all(m in self._index for m in range(start, stop))


class VehicleState(NamedTuple):
    vid: int
    lane: int
    cell: int
    velocity: int
    prev_cell: int


@dataclass
class SampleLog:
    """Per-step, per-vehicle samples taken after each move.

    ``time_step`` counts steps from the start of the run; the minute of a
    sample is ``start_minute + time_step // steps_per_minute``.
    """

    time_step: np.ndarray
    lane: np.ndarray
    cell: np.ndarray
    velocity: np.ndarray
    start_minute: int = 0
    minutes: int = 0
    steps_per_minute: int = STEPS_PER_MINUTE
    injected: int = 0
    exited: int = 0
    warnings: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.time_step)

    @property
    def minute(self) -> np.ndarray:
        return self.start_minute + self.time_step // self.steps_per_minute


@dataclass
class SimState:
    """Mutable simulator state; vehicles are slots in fixed-size arrays.

    ``occ[lane, cell]`` holds the slot index of the occupant or -1.
    """

    occ: np.ndarray
    cell: np.ndarray
    lane: np.ndarray
    vel: np.ndarray
    prev: np.ndarray
    vid: np.ndarray
    alive: np.ndarray
    free: np.ndarray
    meta: np.ndarray
    rng: np.random.Generator
    arrival_speed: np.ndarray
    exit_log: list[tuple[int, int]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @classmethod
    def empty(cls, road: RoadConfig, seed=None) -> "SimState":
        capacity = road.lanes * road.length_cells
        meta = np.zeros(6, dtype=np.int64)
        meta[_N_FREE] = capacity
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return cls(
            occ=np.full((road.lanes, road.length_cells), -1, dtype=np.int64),
            cell=np.zeros(capacity, dtype=np.int64),
            lane=np.zeros(capacity, dtype=np.int64),
            vel=np.zeros(capacity, dtype=np.int64),
            prev=np.zeros(capacity, dtype=np.int64),
            vid=np.full(capacity, -1, dtype=np.int64),
            alive=np.zeros(capacity, dtype=np.bool_),
            # popped from the end, so slot 0 is handed out first
            free=np.arange(capacity - 1, -1, -1, dtype=np.int64),
            meta=meta,
            rng=rng,
            arrival_speed=np.ones(road.lanes, dtype=np.int64),
        )

    @property
    def time_step(self) -> int:
        return int(self.meta[_TIME])

    @property
    def injected(self) -> int:
        return int(self.meta[_INJECTED])

    @property
    def exited(self) -> int:
        return int(self.meta[_EXITED])

    @property
    def pending_injections(self) -> int:
        return int(self.meta[_PENDING])

    @property
    def n_vehicles(self) -> int:
        return int(self.alive.sum())

    def vehicles(self) -> list[VehicleState]:
        """Present vehicles ordered by lane, then ascending cell."""
        slots = np.flatnonzero(self.alive)
        out = [
            VehicleState(int(self.vid[k]), int(self.lane[k]), int(self.cell[k]),
                         int(self.vel[k]), int(self.prev[k]))
            for k in slots
        ]
        return sorted(out, key=lambda v: (v.lane, v.cell))

    def place(self, lane: int, cell: int, velocity: int, prev_cell: int | None = None) -> int:
        """Put a vehicle on the road directly (setup helper). Returns its id."""
        if self.occ[lane, cell] >= 0:
            raise ValueError(f"cell ({lane}, {cell}) is occupied")
        k = _alloc(self.free, self.meta)
        _init_vehicle(self.occ, self.cell, self.lane, self.vel, self.prev, self.vid,
                      self.alive, self.meta, k, lane, cell, velocity)
        if prev_cell is not None:
            self.prev[k] = prev_cell
        return int(self.vid[k])


# --------------------------------------------------------------------------
# compiled kernels

@numba.njit(cache=True, nogil=True)
def _alloc(free, meta):
    meta[_N_FREE] -= 1
    return free[meta[_N_FREE]]


@numba.njit(cache=True, nogil=True)
def _init_vehicle(occ, cell, lane, vel, prev, vid, alive, meta, k, ln, c, v):
    occ[ln, c] = k
    cell[k] = c
    lane[k] = ln
    vel[k] = v
    prev[k] = c
    vid[k] = meta[_NEXT_VID]
    alive[k] = True
    meta[_NEXT_VID] += 1


@numba.njit(cache=True, nogil=True)
def _admit(occ, cell, lane, vel, prev, vid, alive, free, meta, speed, rng):
    """Place queued arrivals into cell 0 of random free lanes."""
    lanes = occ.shape[0]
    free_lanes = np.empty(lanes, dtype=np.int64)
    while meta[_PENDING] > 0:
        n = 0
        for ln in range(lanes):
            if occ[ln, 0] < 0:
                free_lanes[n] = ln
                n += 1
        if n == 0:
            break
        ln = free_lanes[int(rng.random() * n)]
        k = _alloc(free, meta)
        _init_vehicle(occ, cell, lane, vel, prev, vid, alive, meta, k, ln, 0, speed[ln])
        meta[_PENDING] -= 1
        meta[_INJECTED] += 1


@numba.njit(cache=True, nogil=True)
def _gap_ahead(occ, ln, c, horizon):
    """Empty cells in front of ``c`` in lane ``ln``, capped at ``horizon``."""
    length = occ.shape[1]
    for d in range(1, horizon + 1):
        if c + d >= length:
            return horizon
        if occ[ln, c + d] >= 0:
            return d - 1
    return horizon


@numba.njit(cache=True, nogil=True)
def _lane_change_pass(occ, cell, lane, vel, vmax, vmax_all, prob, rng, moved):
    lanes, length = occ.shape
    if lanes < 2:
        return 0
    moved[:] = False
    n_moves = 0
    for c in range(length - 1, -1, -1):
        for ln in range(lanes):
            k = occ[ln, c]
            if k < 0 or moved[k]:
                continue
            v1 = vel[k] + 1
            best_lane = -1
            best_v = min(vmax[ln], v1, _gap_ahead(occ, ln, c, vmax_all))
            # right neighbour first so it wins ties
            for side in range(2):
                cand = ln + 1 if side == 0 else ln - 1
                if cand < 0 or cand >= lanes or occ[cand, c] >= 0:
                    continue
                safe = True
                for d in range(1, vmax_all + 1):
                    if c - d < 0:
                        break
                    f = occ[cand, c - d]
                    if f >= 0:
                        safe = d - 1 >= vel[f]
                        break
                if not safe:
                    continue
                v_cand = min(vmax[cand], v1, _gap_ahead(occ, cand, c, vmax_all))
                if v_cand > best_v:
                    best_v = v_cand
                    best_lane = cand
            if best_lane >= 0 and rng.random() < prob:
                occ[ln, c] = -1
                occ[best_lane, c] = k
                lane[k] = best_lane
                moved[k] = True
                n_moves += 1
    return n_moves


@numba.njit(cache=True, nogil=True)
def _update(occ, cell, lane, vel, prev, vid, alive, free, meta, vmax, bn0, bn1,
            p_bn, p, q, r, rng, order, newvel, exit_buf):
    """Velocity update and move for one step. Returns the number of exits."""
    lanes, length = occ.shape
    n_exit = 0
    for ln in range(lanes):
        n = 0
        for c in range(length - 1, -1, -1):
            k = occ[ln, c]
            if k >= 0:
                order[ln, n] = k
                n += 1
        vm = vmax[ln]
        for j in range(n):
            k = order[ln, j]
            s = 2 if rng.random() < r else 1
            p_eff = p_bn if bn0 <= cell[k] < bn1 else p
            brake = rng.random() < p_eff
            slow = rng.random() < q
            v = min(vm, vel[k] + 1)
            if j - s >= 0:
                ahead = order[ln, j - s]
                if slow:
                    v = min(v, prev[ahead] - prev[k] - s)
                v = min(v, cell[ahead] - cell[k] - s)
            if brake and v >= 1:
                v -= 1
            if j >= 1:
                leader = order[ln, j - 1]
                v = min(v, cell[leader] - cell[k] - 1 + newvel[leader])
            newvel[k] = max(v, 0)
        order[ln, n] = -1
    t = meta[_TIME]
    for ln in range(lanes):
        j = 0
        while True:
            k = order[ln, j]
            if k < 0:
                break
            j += 1
            c = cell[k]
            v = newvel[k]
            occ[ln, c] = -1
            prev[k] = c
            vel[k] = v
            dest = c + v
            if dest >= length:
                exit_buf[n_exit, 0] = t
                exit_buf[n_exit, 1] = vid[k]
                n_exit += 1
                alive[k] = False
                vid[k] = -1
                free[meta[_N_FREE]] = k
                meta[_N_FREE] += 1
                meta[_EXITED] += 1
            else:
                cell[k] = dest
                occ[ln, dest] = k
    meta[_TIME] = t + 1
    return n_exit


@numba.njit(cache=True, nogil=True)
def _run_steps(occ, cell, lane, vel, prev, vid, alive, free, meta, vmax, bn0, bn1,
               p_bn, p, q, r, lc_prob, rng, arrivals, speed, order, newvel, moved,
               exit_buf, samples, t0):
    """Run ``len(arrivals)`` full steps; returns (n_samples, n_exits)."""
    lanes, length = occ.shape
    vmax_all = 0
    for ln in range(lanes):
        vmax_all = max(vmax_all, vmax[ln])
    n_s = 0
    n_e = 0
    for i in range(arrivals.shape[0]):
        meta[_PENDING] += arrivals[i]
        _admit(occ, cell, lane, vel, prev, vid, alive, free, meta, speed, rng)
        _lane_change_pass(occ, cell, lane, vel, vmax, vmax_all, lc_prob, rng, moved)
        n_e += _update(occ, cell, lane, vel, prev, vid, alive, free, meta, vmax,
                       bn0, bn1, p_bn, p, q, r, rng, order, newvel, exit_buf[n_e:])
        ts = meta[_TIME] - 1 - t0
        for ln in range(lanes):
            for c in range(length):
                k = occ[ln, c]
                if k >= 0:
                    samples[n_s, 0] = ts
                    samples[n_s, 1] = ln
                    samples[n_s, 2] = c
                    samples[n_s, 3] = vel[k]
                    n_s += 1
    return n_s, n_e


# --------------------------------------------------------------------------
# public operations

def _vmax(road: RoadConfig) -> np.ndarray:
    return np.asarray(road.speed_limit_per_lane, dtype=np.int64)


def _scratch(road: RoadConfig, state: SimState):
    capacity = state.cell.shape[0]
    order = np.empty((road.lanes, road.length_cells + 1), dtype=np.int64)
    newvel = np.zeros(capacity, dtype=np.int64)
    moved = np.zeros(capacity, dtype=np.bool_)
    return order, newvel, moved


def step(state: SimState, road: RoadConfig, params: ModelParams) -> SimState:
    """Advance one longitudinal update (no lane changes, no admissions)."""
    order, newvel, _ = _scratch(road, state)
    exit_buf = np.empty((state.cell.shape[0], 2), dtype=np.int64)
    bn0, bn1 = road.bottleneck_span
    n = _update(state.occ, state.cell, state.lane, state.vel, state.prev, state.vid,
                state.alive, state.free, state.meta, _vmax(road), bn0, bn1,
                params.p_bn, params.p, params.q, params.r, state.rng, order, newvel, exit_buf)
    state.exit_log.extend((int(t), int(v)) for t, v in exit_buf[:n])
    return state


def plan_lane_changes(state: SimState, road: RoadConfig, params: ModelParams | None = None,
                      prob: float = LANE_CHANGE_PROB) -> SimState:
    """Apply the lateral-move pass for the current step in place.

    A vehicle moves when the velocity it could reach next step without random
    braking is strictly higher in a neighbouring lane, the neighbouring cell is
    free and the trailing vehicle there cannot reach it; then it moves with
    probability ``prob``.  ``params`` is accepted for symmetry with ``step``;
    the decision is deterministic apart from the final coin flip.
    """
    if road.lanes < 2:
        return state
    _, _, moved = _scratch(road, state)
    vmax = _vmax(road)
    _lane_change_pass(state.occ, state.cell, state.lane, state.vel, vmax, int(vmax.max()),
                      prob, state.rng, moved)
    return state


def arrival_profile(count: int, steps: int = STEPS_PER_MINUTE) -> np.ndarray:
    """Arrivals per step for ``count`` vehicles spread evenly over a minute."""
    arrivals = np.zeros(steps, dtype=np.int64)
    if count > 0:
        np.add.at(arrivals, (np.arange(count) * steps) // count, 1)
    return arrivals


def _arrival_speed(road: RoadConfig, speed_kmh: float) -> np.ndarray:
    c = kmh_to_cells(speed_kmh) if speed_kmh > 0 else 1
    return np.clip(c, 1, _vmax(road)).astype(np.int64)


def inject_vehicles(state: SimState, road: RoadConfig, count: int, speed_kmh: float,
                    params: ModelParams | None = None) -> SimState:
    """Run one minute of origin inflow.

    ``count`` arrivals are spread evenly over the minute's steps.  An arrival
    takes cell 0 of a random free lane with ``speed_kmh`` converted to cells
    and clamped to the lane limit; if every cell 0 is taken it waits in the
    queue.  Without ``params`` only admissions happen (no movement), which
    is enough to check bookkeeping; with ``params`` each step also runs the
    lane-change pass and the longitudinal update.
    """
    state.arrival_speed[:] = _arrival_speed(road, speed_kmh)
    arrivals = arrival_profile(count)
    if params is None:
        for a in arrivals:
            state.meta[_PENDING] += a
            _admit(state.occ, state.cell, state.lane, state.vel, state.prev, state.vid,
                   state.alive, state.free, state.meta, state.arrival_speed, state.rng)
            state.meta[_TIME] += 1
        return state
    _run_block(state, road, params, arrivals)
    return state


def advance(state: SimState, road: RoadConfig, params: ModelParams, arrivals: int = 0,
            speed_kmh: float | None = None) -> np.ndarray:
    """One complete step (admissions, lane changes, update); returns its samples."""
    if speed_kmh is not None:
        state.arrival_speed[:] = _arrival_speed(road, speed_kmh)
    return _run_block(state, road, params, np.array([arrivals], dtype=np.int64))


def _run_block(state: SimState, road: RoadConfig, params: ModelParams, arrivals: np.ndarray,
               t0: int = 0):
    order, newvel, moved = _scratch(road, state)
    capacity = state.cell.shape[0]
    steps = len(arrivals)
    samples = np.empty((steps * capacity, 4), dtype=np.int32)
    exit_buf = np.empty((steps * capacity, 2), dtype=np.int64)
    bn0, bn1 = road.bottleneck_span
    n_s, n_e = _run_steps(state.occ, state.cell, state.lane, state.vel, state.prev, state.vid,
                          state.alive, state.free, state.meta, _vmax(road), bn0, bn1,
                          params.p_bn, params.p, params.q, params.r, LANE_CHANGE_PROB,
                          state.rng, arrivals, state.arrival_speed, order, newvel, moved,
                          exit_buf, samples, t0)
    state.exit_log.extend((int(t), int(v)) for t, v in exit_buf[:n_e])
    return samples[:n_s]


def run_scenario(road: RoadConfig, params: ModelParams, inflow: InflowSchedule, minutes: int,
                 seed, start_minute: int = 0) -> SampleLog:
    """Simulate ``minutes`` minutes from an empty road driven by ``inflow``.

    The run covers minutes ``start_minute .. start_minute + minutes - 1`` of
    the inflow schedule and is fully determined by its arguments.
    """
    if minutes < 1:
        raise ValueError("minutes must be >= 1")
    state = SimState.empty(road, seed)
    chunks = []
    warnings = []
    for i in range(minutes):
        count, speed = inflow.record(start_minute + i)
        state.arrival_speed[:] = _arrival_speed(road, speed)
        chunks.append(_run_block(state, road, params, arrival_profile(count)))
        if count > 0 and state.pending_injections > 10 * count:
            warnings.append(f"minute {start_minute + i}: origin queue saturated "
                            f"({state.pending_injections} waiting)")
    if warnings:
        log.warning("%d saturated inflow minutes", len(warnings))
    samples = np.concatenate(chunks) if chunks else np.empty((0, 4), dtype=np.int32)
    return SampleLog(
        time_step=samples[:, 0].copy(),
        lane=samples[:, 1].copy(),
        cell=samples[:, 2].copy(),
        velocity=samples[:, 3].copy(),
        start_minute=start_minute,
        minutes=minutes,
        injected=state.injected,
        exited=state.exited,
        warnings=warnings,
    )


def check_state(state: SimState, road: RoadConfig) -> None:
    """Raise AssertionError if the state breaks an invariant."""
    slots = np.flatnonzero(state.alive)
    lanes = state.lane[slots]
    cells = state.cell[slots]
    assert len(set(zip(lanes.tolist(), cells.tolist()))) == len(slots), "two vehicles share a cell"
    assert np.all(state.occ[lanes, cells] == slots), "occupancy out of sync"
    assert int((state.occ >= 0).sum()) == len(slots), "stale occupancy entries"
    vmax = _vmax(road)[lanes]
    assert np.all((state.vel[slots] >= 0) & (state.vel[slots] <= vmax)), "velocity out of bounds"
    assert len(slots) + state.exited == state.injected + _placed_directly(state), "conservation"


def _placed_directly(state: SimState) -> int:
    # vehicles added with SimState.place bypass the injection counter
    return int(state.meta[_NEXT_VID]) - state.injected
