import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from emnowcast.data import Dataset, ParameterEstimates
from emnowcast.validation import softmax

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_dataset(rng, n=12, d=4, tau=None, p=3, lam=3.0):
    """Small random dataset with a mix of complete and censored records."""
    tau = tau or d + 3
    occ = rng.integers(1, tau + 1, size=n)
    counts = rng.poisson(lam, size=(n, d))
    feats = rng.normal(size=(n, p))
    return Dataset([f"e{i}" for i in range(n)], occ, counts, feats, [f"f{k}" for k in range(p)], d, tau)


def random_estimates(rng, n, d):
    return ParameterEstimates(np.exp(rng.normal(size=n)), softmax(rng.normal(size=(n, d))))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
