import numpy as np
import pytest

from diamondxray.connection import (BasisSpec, random_connection,
                                    random_lightsink)
from diamondxray.geometry import DiamondConfig
from diamondxray.transport import TransportOpts


@pytest.fixture(scope="session")
def cfg():
    return DiamondConfig(epsilon=0.25)


@pytest.fixture(scope="session")
def basis():
    return BasisSpec.build(2)


@pytest.fixture(scope="session")
def opts():
    return TransportOpts(steps=128)


@pytest.fixture()
def rng():
    return np.random.default_rng(20260811)


@pytest.fixture(scope="session")
def pair(basis):
    r = np.random.default_rng(99)
    a = random_connection(r, basis, 3, norm=0.8)
    b = random_connection(r, basis, 3, norm=0.6)
    return a, b


@pytest.fixture(scope="session")
def sink_pair(basis):
    r = np.random.default_rng(77)
    a = random_lightsink(r, basis, 3, norm=0.8)
    b = random_lightsink(r, basis, 3, norm=0.6)
    return a, b
