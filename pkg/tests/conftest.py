import numpy as np
import pytest

from dethomog.fastflow import FlowSpec


@pytest.fixture(scope="session")
def lorenz():
    return FlowSpec.lorenz()


@pytest.fixture(scope="session")
def rotation():
    return FlowSpec.rotation()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
