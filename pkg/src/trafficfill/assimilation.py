"""Particle filter over a discrete grid of simulation scenarios.

Each minute, every scenario is scored against the observed patches: present
patches through Gaussian kernels on the percentage and absolute velocity
error, missing patches through the same kernels averaged over the patch's
velocity prior.  The summed log-likelihood ``l`` becomes the weight
``l**-2``; particles are then resampled and lightly jittered across
neighbouring grid points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from .field import CLASS1, CLASS2, OBSERVED, PatchGrid, SegmentClassMap
from .priors import PriorSpec, quadrature_rule
from .snfs import ModelParams

LOG_FLOOR = 1e-6
REJUVENATION_PROB = 0.1


@dataclass(frozen=True)
class LikelihoodConfig:
    sigma_p: float = 20.0  # percent
    sigma_a: float = 10.0  # km/h

    def __post_init__(self):
        if self.sigma_p <= 0 or self.sigma_a <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class ScenarioSet:
    """Parameter sets with their complete simulated grids.

    ``grids[n]`` is the ``segments x minutes`` field of scenario ``n``, whose
    first column is minute ``start_minute``.  ``coords[n]`` locates the
    scenario on the parameter lattice (one integer per dimension).
    """

    params: list[ModelParams]
    grids: np.ndarray
    start_minute: int = 0
    coords: np.ndarray | None = None
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.grids = np.asarray(self.grids, dtype=float)
        if len(self.params) != len(self.grids):
            raise ValueError("one grid per parameter set")
        if self.coords is None:
            self.coords = lattice_coords(self.params)
        self._lookup = {tuple(c): i for i, c in enumerate(self.coords.tolist())}

    def __len__(self):
        return len(self.params)

    @property
    def lattice_shape(self) -> tuple[int, ...]:
        if len(self) == 0:
            return (0, 0, 0, 0)
        return tuple(int(v) + 1 for v in self.coords.max(axis=0))

    def index_of(self, coord) -> int | None:
        return self._lookup.get(tuple(int(c) for c in coord))

    def grid(self, n: int) -> PatchGrid:
        return PatchGrid(self.grids[n], self.start_minute)

    def window(self, start: int, stop: int) -> np.ndarray:
        a, b = start - self.start_minute, stop - self.start_minute
        if a < 0 or b > self.grids.shape[2]:
            raise ValueError(f"scenarios do not cover minutes [{start}, {stop})")
        return self.grids[:, :, a:b]


def lattice_coords(params: Sequence[ModelParams]) -> np.ndarray:
    """Integer lattice position of each parameter set, per dimension."""
    if not params:
        return np.zeros((0, 4), dtype=np.int64)
    table = np.array([p.as_tuple() for p in params])
    cols = []
    for d in range(4):
        levels = np.unique(np.round(table[:, d], 6))
        cols.append(np.searchsorted(levels, np.round(table[:, d], 6)))
    return np.stack(cols, axis=1).astype(np.int64)


@dataclass
class ParticleEnsemble:
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if np.any(self.counts < 0):
            raise ValueError("negative particle count")

    @classmethod
    def uniform(cls, n_scenarios: int, per_scenario: int = 1) -> "ParticleEnsemble":
        return cls(np.full(n_scenarios, per_scenario, dtype=np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class Posterior:
    minutes: list[int]
    weights: list[np.ndarray]
    histograms: list[np.ndarray]
    counts: np.ndarray
    map_params: ModelParams
    map_index: int
    skipped: list[int] = field(default_factory=list)


def gaussian_kernel(e, sigma):
    """Normal density with standard deviation ``sigma`` evaluated at ``e``."""
    return np.exp(-np.square(e) / (2.0 * sigma * sigma)) / math.sqrt(2.0 * math.pi * sigma * sigma)


def _log_kernel(e, sigma):
    return -np.square(e) / (2.0 * sigma * sigma) - 0.5 * math.log(2.0 * math.pi * sigma * sigma)


def segment_loglik_observed(u_obs, u_sim, cfg: LikelihoodConfig = LikelihoodConfig()):
    """Log-likelihood of a simulated speed against an observed one."""
    u_obs = np.asarray(u_obs, dtype=float)
    u_sim = np.asarray(u_sim, dtype=float)
    e_abs = u_sim - u_obs
    e_pct = 100.0 * e_abs / u_obs
    return _log_kernel(e_pct, cfg.sigma_p) + _log_kernel(e_abs, cfg.sigma_a)


def segment_loglik_missing(spec: PriorSpec, u_sim, cfg: LikelihoodConfig = LikelihoodConfig(),
                           rule=None):
    """Log-likelihood of simulated speed(s) at a missing patch.

    Both kernels are averaged over the prior separately and the two averages
    multiplied.  Works in log space so distant simulations do not underflow.
    ``rule`` may pass a precomputed ``quadrature_rule(spec)``.
    """
    x, w = quadrature_rule(spec) if rule is None else rule
    u_sim = np.asarray(u_sim, dtype=float)
    e_abs = u_sim[..., None] - x
    e_pct = 100.0 * e_abs / x
    lp = logsumexp(_log_kernel(e_pct, cfg.sigma_p), b=w, axis=-1)
    la = logsumexp(_log_kernel(e_abs, cfg.sigma_a), b=w, axis=-1)
    return lp + la


def joint_logweight(logliks) -> float:
    """Unnormalised weight ``l**-2`` of the summed per-segment log-likelihoods."""
    logliks = np.asarray(logliks, dtype=float)
    if logliks.size == 0:
        raise ValueError("need at least one segment")
    total = float(logliks.sum())
    return 1.0 / max(abs(total), LOG_FLOOR) ** 2


def _weights_from_total(total: np.ndarray) -> np.ndarray:
    return 1.0 / np.maximum(np.abs(total), LOG_FLOOR) ** 2


def normalize_weights(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    s = w.sum()
    if s <= 0:
        raise ValueError("all weights are zero")
    return w / s


def systematic_indices(p: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` draws from the discrete distribution ``p`` with one shared offset."""
    cum = np.cumsum(p)
    cum[-1] = 1.0
    positions = (rng.random() + np.arange(n)) / n
    return np.searchsorted(cum, positions, side="right")


def _jitter(idx: np.ndarray, scenarios: ScenarioSet, prob: float, rng) -> np.ndarray:
    hop = rng.random(len(idx)) < prob
    dims = rng.integers(0, 4, len(idx))
    steps = np.where(rng.random(len(idx)) < 0.5, -1, 1)
    shape = np.array(scenarios.lattice_shape)
    out = idx.copy()
    for i in np.flatnonzero(hop):
        coord = scenarios.coords[idx[i]].copy()
        d = dims[i]
        coord[d] = min(max(coord[d] + steps[i], 0), shape[d] - 1)
        j = scenarios.index_of(coord)
        if j is not None:
            out[i] = j
    return out


def resample(ens: ParticleEnsemble, w, seed, scenarios: ScenarioSet | None = None,
             rejuvenation: float = REJUVENATION_PROB) -> ParticleEnsemble:
    """Systematic resampling of the ensemble's particles.

    Each particle currently on scenario ``n`` carries weight ``w[n]``, so the
    draw probability of ``n`` is proportional to ``counts[n] * w[n]``.  After
    the draw each particle, with probability ``rejuvenation``, moves one
    lattice step along a random parameter axis (clamped at the edges).  Pass
    ``rejuvenation=0`` or no ``scenarios`` to skip that.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    w = np.asarray(w, dtype=float)
    n_total = ens.total
    mass = ens.counts * w
    if mass.sum() <= 0:
        mass = w
    idx = systematic_indices(mass / mass.sum(), n_total, rng)
    if scenarios is not None and rejuvenation > 0:
        idx = _jitter(idx, scenarios, rejuvenation, rng)
    return ParticleEnsemble(np.bincount(idx, minlength=len(w)))


def map_estimate(ens: ParticleEnsemble, scenarios: ScenarioSet | Sequence[ModelParams]) -> ModelParams:
    """Parameter set holding the most particles; ties go to the smallest tuple."""
    return scenarios_params(scenarios)[map_index(ens, scenarios)]


def scenarios_params(scenarios) -> list[ModelParams]:
    return scenarios.params if isinstance(scenarios, ScenarioSet) else list(scenarios)


def map_index(ens: ParticleEnsemble, scenarios) -> int:
    params = scenarios_params(scenarios)
    if ens.total < 1:
        raise ValueError("ensemble has no particles")
    best = int(ens.counts.max())
    tied = np.flatnonzero(ens.counts == best)
    return int(min(tied, key=lambda n: params[n].as_tuple()))


def window_logliks(obs: PatchGrid, classes: SegmentClassMap,
                   priors: Mapping[tuple[int, int], PriorSpec], sims: np.ndarray,
                   cfg: LikelihoodConfig = LikelihoodConfig()) -> np.ndarray:
    """Summed log-likelihood per scenario and minute, shape ``(n, minutes)``.

    ``sims`` holds the scenario grids for the same minutes as ``obs``.
    """
    n = sims.shape[0]
    total = np.zeros((n, obs.minutes))
    seen = classes.kind == OBSERVED
    m_idx, t_idx = np.nonzero(seen)
    if len(m_idx):
        ll = segment_loglik_observed(obs.values[m_idx, t_idx], sims[:, m_idx, t_idx], cfg)
        np.add.at(total, (slice(None), t_idx), ll)
    for m, t in zip(*np.nonzero(~seen)):
        spec = priors.get((int(m), int(t)))
        if spec is None:
            raise ValueError(f"no prior for missing patch (segment {m}, minute offset {t})")
        total[:, t] += segment_loglik_missing(spec, sims[:, m, t], cfg)
    return total


def assimilate_window(obs: PatchGrid, classes: SegmentClassMap,
                      priors: Mapping[tuple[int, int], PriorSpec], scenarios: ScenarioSet,
                      ens: ParticleEnsemble, seed, cfg: LikelihoodConfig = LikelihoodConfig(),
                      rejuvenation: float = REJUVENATION_PROB) -> tuple[Posterior, ParticleEnsemble]:
    """Run the filter minute by minute over the observation window.

    ``priors`` maps ``(segment, minute offset)`` of each missing patch to its
    prior.  Returns the posterior and the updated ensemble.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    stop = obs.start_minute + obs.minutes
    sims = scenarios.window(obs.start_minute, stop)
    totals = window_logliks(obs, classes, priors, sims, cfg)
    minutes, weights, hists, skipped = [], [], [], []
    for t, minute in enumerate(obs.minute_index):
        if obs.segments == 0:
            skipped.append(int(minute))
            continue
        w = normalize_weights(_weights_from_total(totals[:, t]))
        ens = resample(ens, w, rng, scenarios, rejuvenation)
        minutes.append(int(minute))
        weights.append(w)
        hists.append(ens.counts.copy())
    k = map_index(ens, scenarios)
    post = Posterior(minutes, weights, hists, ens.counts.copy(), scenarios.params[k], k, skipped)
    return post, ens
