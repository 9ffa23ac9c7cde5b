import numpy as np
import pytest

from xychain.model import ChainGeometry, PhysicalParams


@pytest.fixture
def chain3():
    return ChainGeometry.line(3, 20.0)


@pytest.fixture
def pair30():
    return ChainGeometry.line(2, 30.0)


@pytest.fixture
def params():
    return PhysicalParams()


@pytest.fixture
def lossless_params():
    return PhysicalParams(gamma_eff=0.0, gamma_up=0.0, gamma_down=0.0, temperature=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
