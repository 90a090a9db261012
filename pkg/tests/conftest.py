import numpy as np
import pytest

from bipprune.data import make_blobs
from bipprune.models import build_network, init_params


@pytest.fixture(scope="session")
def blobs4():
    return make_blobs(4, 250, 8, 4.0, seed=0)


@pytest.fixture(scope="session")
def small_blobs():
    return make_blobs(4, 40, 4, 5.0, seed=1)


@pytest.fixture
def tiny():
    net = build_network("mlp-tiny")
    return net, init_params(net, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
