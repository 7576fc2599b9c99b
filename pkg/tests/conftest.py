import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from lowthrust_reach.dynamics import DynamicsModel
from lowthrust_reach.setops import Zonotope

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

HALO_X0 = np.array([1.1720, 0.0, -0.0862, 0.0, -0.1880, 0.0])
EARTH_MARS_X0 = np.array([-140699693.0, -51614428.0, 980.0, 9.774596, -28.07828, 4.337725e-4])


def finite(lo=-10.0, hi=10.0):
    return st.floats(lo, hi, allow_nan=False, allow_infinity=False)


@st.composite
def zonotopes(draw, n=None, max_gens=6, scale=1.0):
    n = draw(st.integers(1, 4)) if n is None else n
    p = draw(st.integers(0, max_gens))
    c = draw(hnp.arrays(float, n, elements=finite()))
    G = draw(hnp.arrays(float, (n, p), elements=finite(-scale, scale)))
    return Zonotope(c, G)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def cr3bp():
    return DynamicsModel.cr3bp(t_max=0.1, mass=1000.0)


@pytest.fixture
def free_model():
    return DynamicsModel.rotating_free(t_max=0.1, mass=1000.0)


@pytest.fixture
def two_body():
    return DynamicsModel.two_body(t_max=0.3, mass=1000.0)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
