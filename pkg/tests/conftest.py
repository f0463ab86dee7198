import numpy as np
import pytest

from mhdlab import build_periodic_mesh, build_tri_mesh


@pytest.fixture(scope="session")
def tri4():
    return build_tri_mesh(4)


@pytest.fixture(scope="session")
def quad4():
    return build_periodic_mesh(4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
