import numpy as np
import pytest

from cqrsub import QuantileGrid, Shard, ShardedDataset, ThetaEstimate, WeightedSample


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance: end-to-end acceptance criteria (slow Monte Carlo runs)"
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def random_instance(rng, n, p, m, weight_scale=(0.1, 5.0)):
    """Small random weighted CQR instance with t(3) noise."""
    X = rng.normal(size=(n, p))
    beta = rng.normal(size=p)
    y = X @ beta + rng.standard_t(3, size=n)
    w = rng.uniform(*weight_scale, size=n)
    grid = QuantileGrid(np.unique(rng.uniform(0.05, 0.95, size=m)))
    return WeightedSample(y, X, w), grid


def random_sharded(rng, total_n, k, p, beta=None, noise=1.0):
    """Random sharded dataset with normal noise; returns dataset and true slopes."""
    if beta is None:
        beta = rng.normal(size=p)
    sizes = rng.multinomial(total_n - k, np.full(k, 1.0 / k)) + 1
    shards = []
    for nk in sizes:
        X = rng.normal(size=(int(nk), p))
        shards.append(Shard(X @ beta + noise * rng.normal(size=int(nk)), X))
    return ShardedDataset(tuple(shards)), np.asarray(beta, dtype=np.float64)


def random_theta(rng, p, m):
    return ThetaEstimate(rng.normal(size=p), np.sort(rng.normal(size=m)))
