import numpy as np
import pytest

from superscan.tensor import precision


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture
def nprng():
    return np.random.default_rng(1234)
