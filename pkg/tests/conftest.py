from pathlib import Path

import numpy as np
import pytest

from src.samplers import BackgroundDataset, save_background
from src.shapley import FeatureSpace

REPO = Path(__file__).resolve().parent.parent


def exact_moment_rows(mean, cov, n, seed):
    """Gaussian-looking rows whose sample mean and sample covariance (ddof=1)
    equal ``mean`` and ``cov`` up to rounding."""
    mean = np.asarray(mean, dtype="float64")
    cov = np.asarray(cov, dtype="float64")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, mean.size))
    z -= z.mean(axis=0)
    z = z @ np.linalg.inv(np.linalg.cholesky(np.atleast_2d(np.cov(z, rowvar=False)))).T
    return mean + z @ np.linalg.cholesky(cov).T


def make_dataset(rows, names=None):
    rows = np.asarray(rows, dtype="float64")
    names = names or tuple(f"x{i + 1}" for i in range(rows.shape[1]))
    return BackgroundDataset(rows, FeatureSpace(names))


def random_game(n, seed, outputs=1):
    """Characteristic function backed by a random coalition table."""
    table = np.random.default_rng(seed).normal(size=(1 << n, outputs))
    return table, (lambda c: table[c.mask])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def chain_dataset():
    """x1 -> x2 with x2 = 0.8 x1 + eps, sd(x1) = 0.5, sd(eps) = 0.1."""
    cov = [[0.25, 0.2], [0.2, 0.17]]
    return make_dataset(exact_moment_rows([0.0, 0.0], cov, 4000, seed=11))


@pytest.fixture
def additive_csv(tmp_path):
    """Background CSV for the shipped 8-feature additive model."""
    rows = np.random.default_rng(5).normal(loc=np.arange(8) * 0.1, scale=1.0, size=(400, 8))
    dataset = make_dataset(rows)
    path = tmp_path / "data" / "background.csv"
    save_background(dataset, path)
    return path, dataset
