import numpy as np
import pytest

from qrfvimp.forest import Dataset


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def make_linear(n, p=2, coef=(1.0,), noise=1.0, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, p))
    c = np.zeros(p)
    c[:len(coef)] = coef
    y = X @ c + noise * rng.standard_normal(n)
    return Dataset(X, y)


@pytest.fixture
def linear_data():
    return make_linear(400, p=3, coef=(2.0, -1.0), seed=3)
