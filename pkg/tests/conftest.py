import numpy as np
import pytest

from kernelflow.grids import SampleSet, TimeGrid


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_data(rng):
    """P=3 training samples in D=8, linear teacher."""
    x = rng.standard_normal((3, 8))
    beta = rng.standard_normal(8)
    y = x @ beta / np.sqrt(8)
    return SampleSet.from_inputs(x, y)


@pytest.fixture
def small_grid():
    return TimeGrid(6, 0.25)


def random_psd(rng, n, scale=1.0):
    m = rng.standard_normal((n, n))
    return scale * (m @ m.T) / n


def random_causal_pair(rng, p, t, scale=0.3):
    """(A, B) with A strictly causal and B causal, sample-major (PT, PT)."""
    a = np.zeros((p, t, p, t))
    b = np.zeros((p, t, p, t))
    for k in range(t):
        for s in range(t):
            if s < k:
                a[:, k, :, s] = scale * rng.standard_normal((p, p))
            if s <= k:
                b[:, k, :, s] = scale * rng.standard_normal((p, p))
    return a.reshape(p * t, p * t), b.reshape(p * t, p * t)
