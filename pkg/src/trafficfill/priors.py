"""Prior densities of the unseen mean velocity in missing patches.

Class 1 (a counter sits in the segment) uses a Gaussian around the counter
speed truncated to ``[u_min, u_max]``.  Class 2 is flat up to 20 km/h and
then falls linearly to zero at ``u_max``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import ndtr

U_MIN_KMH = 1.0
BREAKPOINT_KMH = 20.0
DEFAULT_SIGMA_A = 10.0
QUAD_NODES = 257
MIN_MASS = 1e-12


@dataclass(frozen=True)
class PriorSpec:
    kind: str  # "class1" or "class2"
    u_min: float
    u_max: float
    v_tc: float | None = None
    sigma_a: float = DEFAULT_SIGMA_A
    breakpoint: float = BREAKPOINT_KMH

    def __post_init__(self):
        if self.kind not in ("class1", "class2"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if not self.u_min < self.u_max:
            raise ValueError(f"need u_min < u_max, got [{self.u_min}, {self.u_max}]")
        if self.kind == "class1" and (self.v_tc is None or self.sigma_a <= 0):
            raise ValueError("class1 prior needs a counter speed and sigma_a > 0")

    @classmethod
    def class1(cls, v_tc, u_max, u_min=U_MIN_KMH, sigma_a=DEFAULT_SIGMA_A):
        return cls("class1", float(u_min), float(u_max), float(v_tc), float(sigma_a))

    @classmethod
    def class2(cls, u_max, u_min=U_MIN_KMH):
        return cls("class2", float(u_min), float(u_max))

    @property
    def mass(self) -> float:
        """Gaussian mass on the bounds (Class 1 normaliser)."""
        lo = (self.u_min - self.v_tc) / self.sigma_a
        hi = (self.u_max - self.v_tc) / self.sigma_a
        return float(ndtr(hi) - ndtr(lo))

    @property
    def uniform(self) -> bool:
        """True when the prior collapses to a flat density on the bounds."""
        if self.kind == "class2":
            return self.u_max <= self.breakpoint or self.u_min >= self.breakpoint
        return self.mass < MIN_MASS


def prior_pdf(spec: PriorSpec, u):
    """Density (per km/h) at ``u``; zero outside ``[u_min, u_max]``."""
    u = np.asarray(u, dtype=float)
    inside = (u >= spec.u_min) & (u <= spec.u_max)
    width = spec.u_max - spec.u_min
    if spec.uniform:
        out = np.full(u.shape, 1.0 / width)
    elif spec.kind == "class1":
        s = spec.sigma_a
        out = np.exp(-((u - spec.v_tc) ** 2) / (2 * s * s)) / (math.sqrt(2 * math.pi) * s * spec.mass)
    else:
        b, hi = spec.breakpoint, spec.u_max
        denom = hi + b - 2 * spec.u_min
        out = np.where(u <= b, 2.0 / denom, 2.0 * (hi - u) / ((hi - b) * denom))
    out = np.where(inside, out, 0.0)
    return out if out.ndim else float(out)


def _simpson(a: float, b: float, intervals: int):
    intervals += intervals % 2
    x = np.linspace(a, b, intervals + 1)
    w = np.ones(intervals + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return x, w * (b - a) / (3.0 * intervals)


def _class1_intervals(spec: PriorSpec, base: int) -> int:
    # near a bound the truncated tail decays on the scale sigma^2 / distance;
    # keep at least 16 intervals per decay length there
    c = min(max(spec.v_tc, spec.u_min), spec.u_max)
    dist = abs(spec.v_tc - c)
    scale = spec.sigma_a if dist == 0 else min(spec.sigma_a, spec.sigma_a**2 / dist)
    need = int(math.ceil(16.0 * (spec.u_max - spec.u_min) / scale))
    return max(base, need + need % 2)


def quadrature_rule(spec: PriorSpec, nodes: int = QUAD_NODES):
    """Nodes and weights with the prior folded in: ``sum(w * g(x))`` ~ ``E[g]``.

    Composite Simpson on ``nodes`` points.  For Class 2 the kink at 20 km/h
    is a shared node and each side gets its own uniform grid; a Class 1 prior
    that is steep at a bound gets a finer grid.
    """
    total = nodes - 1
    total += total % 2
    lo, hi = spec.u_min, spec.u_max
    b = spec.breakpoint
    if spec.kind == "class2" and lo < b < hi and not spec.uniform:
        left = int(round(total * (b - lo) / (hi - lo) / 2.0)) * 2
        left = min(max(left, 2), total - 2)
        x1, w1 = _simpson(lo, b, left)
        x2, w2 = _simpson(b, hi, total - left)
        x = np.concatenate([x1, x2[1:]])
        w = np.concatenate([w1[:-1], [w1[-1] + w2[0]], w2[1:]])
    else:
        if spec.kind == "class1" and not spec.uniform:
            total = _class1_intervals(spec, total)
        x, w = _simpson(lo, hi, total)
    return x, w * prior_pdf(spec, x)


def quadrature(spec: PriorSpec, g: Callable[[np.ndarray], np.ndarray]) -> float:
    """Prior-weighted integral of ``g`` over ``[u_min, u_max]``."""
    x, w = quadrature_rule(spec)
    return float(np.dot(w, g(x)))
