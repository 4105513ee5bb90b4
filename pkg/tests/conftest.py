from __future__ import annotations

import numpy as np
import pytest

from mixfbm.kernel import solve_kernel
from mixfbm.sim import TimeGrid


@pytest.fixture(scope="session")
def grid50():
    return TimeGrid(1.0, 50)


@pytest.fixture(scope="session")
def table07(grid50):
    return solve_kernel(grid50, 0.7)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
