import numpy as np
import pytest

from fbflow.app.dependencies import get_problem


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def linear1d():
    return get_problem("linear1d")


@pytest.fixture(scope="session")
def skew2d():
    return get_problem("skew2d")


@pytest.fixture(scope="session")
def lasso1d():
    return get_problem("l1_quadratic")


@pytest.fixture(scope="session")
def box():
    return get_problem("box_projected")


@pytest.fixture(scope="session")
def catalog(linear1d, skew2d, lasso1d, box):
    return [linear1d, skew2d, lasso1d, box]
