import numpy as np
import pytest

from smd_npml.auxiliary import AuxiliaryModel
from smd_npml.sobolev import UNIT_INTERVAL, Interval, SpectralFunction


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def unit():
    return UNIT_INTERVAL


@pytest.fixture
def shifted():
    return Interval(-1.0, 2.0)


@pytest.fixture
def model():
    """A small standing model used across the optimizer tests."""
    return AuxiliaryModel(UNIT_INTERVAL, t=2.0, zeta=0.1, D=4.0, J=16)


@pytest.fixture
def truth():
    return SpectralFunction(UNIT_INTERVAL, [1.0, 0.3, 0.1, 0.03])


def random_function(rng, interval, J, decay=1.0):
    c = rng.standard_normal(J + 1) / (1.0 + np.arange(J + 1)) ** decay
    return SpectralFunction(interval, c)
