import numpy as np
import pytest

from kscontrol.operators import NegNormRealizer, build_grid, build_operators


@pytest.fixture(scope="session")
def ops32():
    return build_operators(build_grid(32))


@pytest.fixture(scope="session")
def ops24():
    return build_operators(build_grid(24))


@pytest.fixture(scope="session")
def realizer32(ops32):
    return NegNormRealizer.from_operators(ops32)


@pytest.fixture(scope="session")
def realizer24(ops24):
    return NegNormRealizer.from_operators(ops24)


@pytest.fixture()
def rng():
    return np.random.default_rng(20240811)
