"""Seed derivation.

Every random stream is a child of the run seed, keyed by a purpose tag and
an index, so streams never collide and any one of them can be regenerated
alone:

    scenario simulation   (seed, SCENARIO, scenario_index)
    twin truth run        (seed, TRUTH)
    twin mask/noise       (seed, MASK)
    filter resampling     (seed, FILTER, window_end_minute)
"""

import numpy as np

SCENARIO, TRUTH, MASK, FILTER = 0, 1, 2, 3


def derive_seed(seed: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *key))
