"""Shared domain constants and small numeric helpers.

Key conventions used across the package:

- 9 age groups: 0-4, 5-11, 12-17, 18-29, 30-39, 40-49, 50-59, 60-69, 70+.
- 5 contact-duration categories: 0-5min, 5-15min, 15-60min, 1-4hr, 4hr+.
- An ego vector has 45 cells laid out age-major: cell = age_group * 5 + duration.
- Edge weights are duration-category midpoints normalized by the top category
  (4hr+ is assigned 8 hours), so the longest category has weight 1.0.
"""

from __future__ import annotations

import numpy as np

N_AGE = 9
N_DUR = 5
N_CELLS = N_AGE * N_DUR

AGE_LOWER = np.array([0, 5, 12, 18, 30, 40, 50, 60, 70], dtype=np.int64)
AGE_UPPER = np.array([4, 11, 17, 29, 39, 49, 59, 69, 120], dtype=np.int64)
AGE_LABELS = ("0-4", "5-11", "12-17", "18-29", "30-39", "40-49", "50-59", "60-69", "70+")

DURATION_LABELS = ("0-5min", "5-15min", "15-60min", "1-4hr", "4hr+")
# Category midpoints in minutes; the open-ended top category counts as 8 hours.
DURATION_MINUTES = np.array([2.5, 10.0, 37.5, 150.0, 480.0])
DURATION_WEIGHTS = DURATION_MINUTES / DURATION_MINUTES[-1]

MAX_AGE = 120


def age_to_group(years: int) -> int:
    """Map an age in whole years to its group index (0..8)."""
    if years < 0 or years > MAX_AGE:
        raise ValueError(f"age {years} outside 0..{MAX_AGE}")
    return int(np.searchsorted(AGE_UPPER, years))


def groups_intersecting(age_min: int, age_max: int) -> list[int]:
    """Group indices whose bracket overlaps the inclusive interval [age_min, age_max]."""
    lo = age_to_group(age_min)
    hi = age_to_group(min(age_max, MAX_AGE))
    return list(range(lo, hi + 1))


def cell_index(age_group: int, duration: int) -> int:
    return age_group * N_DUR + duration


def stochastic_round(values: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Round each entry up or down at random so the expectation is preserved.

    An entry z goes to floor(z) with probability ceil(z) - z and to ceil(z)
    otherwise. Integers (and exact zeros) pass through unchanged.
    """
    values = np.asarray(values, dtype=float)
    floor = np.floor(values)
    frac = values - floor
    up = rng.random(values.shape) < frac
    return (floor + up).astype(np.int64)


def spawn_rng(master_seed: int, *key: int) -> np.random.Generator:
    """Derive an independent, reproducible generator from a master seed.

    Every parallelizable task in the pipeline gets its stream from the master
    seed plus a stable integer key path, so results never depend on scheduling
    or worker count.
    """
    return np.random.default_rng(np.random.SeedSequence([master_seed, *key]))
