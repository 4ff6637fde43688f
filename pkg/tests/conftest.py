import sys
from pathlib import Path

import numpy as np
import pytest

from prinstrat.data import Dataset, Design, MISSING_D, load_dataset

TESTS = Path(__file__).parent
DATA = TESTS / "data"
sys.path.insert(0, str(TESTS))


def hand(name, design):
    return load_dataset(DATA / name, design)


def as_lists(ds):
    x = ds.x[:, 0].tolist() if ds.k else [0.0] * ds.n
    return ds.z.tolist(), ds.d.tolist(), ds.y.tolist(), x


def random_onesided(seed, n=40, binary=True, k=1):
    """Small one-sided dataset with every (arm, covariate cell, dose) combination occupied."""
    rng = np.random.default_rng(seed)
    while True:
        x = rng.integers(0, 2, size=(n, k)).astype(float) if binary else rng.standard_normal((n, k))
        z = np.zeros(n, dtype=int)
        z[rng.permutation(n)[: n // 2]] = 1
        d = np.where(z == 1, (rng.random(n) < 0.3 + 0.4 * (x[:, 0] > 0.5)).astype(int), MISSING_D)
        y = rng.normal(size=n) * rng.uniform(0.5, 3) + 2 * d.clip(0)
        ds = Dataset(Design.ONE_SIDED, z, d, y, x, tuple(f"x{j + 1}" for j in range(k)))
        if _onesided_ok(ds, binary):
            return ds


def _onesided_ok(ds, binary):
    t = ds.z == 1
    if (ds.d[t] == 1).sum() < 2 or (ds.d[t] == 0).sum() < 2:
        return False
    if binary:
        for v in (0.0, 1.0):
            cell = ds.x[:, 0] == v
            if not ((cell & t).any() and (cell & ~t).any()):
                return False
            if len(np.unique(ds.d[cell & t])) < 2:
                return False
    return True


def random_twosided(seed, n=60, binary=False):
    """Small two-sided dataset with all four (z, d) cells occupied and a clear complier share."""
    rng = np.random.default_rng(seed)
    while True:
        x = rng.integers(0, 2, size=n).astype(float) if binary else rng.standard_normal(n)
        u = rng.random(n)
        strata = np.where(u < 0.2, 0, np.where(u < 0.75, 1, 2))
        z = np.zeros(n, dtype=int)
        z[rng.permutation(n)[: n // 2]] = 1
        d = np.where(strata == 0, 1, np.where(strata == 2, 0, z))
        y = rng.normal(size=n) + x + z * (strata == 1)
        ds = Dataset(Design.TWO_SIDED, z, d, y, x.reshape(-1, 1), ("x1",))
        counts = ds.cell_counts()
        if min(counts.values()) >= 2 and np.mean(d[z == 1]) - np.mean(d[z == 0]) > 0.1:
            return ds


@pytest.fixture
def os_a():
    return hand("os_a.csv", Design.ONE_SIDED)


@pytest.fixture
def ts_a():
    return hand("ts_a.csv", Design.TWO_SIDED)
