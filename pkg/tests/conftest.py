import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def rel_err(got, want, floor=1e-12):
    """Max absolute deviation normalized by the largest reference magnitude."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    scale = max(np.max(np.abs(want)), floor)
    return float(np.max(np.abs(got - want)) / scale)
