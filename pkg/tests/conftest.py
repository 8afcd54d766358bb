import numpy as np
import pytest

from mgabrain.phantoms import head_phantom, sphere_mask


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def phantom():
    return head_phantom()


@pytest.fixture
def sphere16():
    return sphere_mask((16, 16, 16), 5.0)
