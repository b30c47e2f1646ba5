import numpy as np
import pytest

from asdlab.calculus import Calc
from asdlab.models import make_background


@pytest.fixture(scope="session")
def flat():
    return make_background("flat_t4")


@pytest.fixture(scope="session")
def sphere():
    return make_background("round_s4")


@pytest.fixture(scope="session")
def product():
    return make_background("s3xs1")


@pytest.fixture(scope="session")
def perturbed():
    return make_background("perturbed_flat", epsilon=1e-3, seed=3)


def sample_points(bg, count=5, seed=0, sites=8):
    lat = bg.lattice(sites)
    return lat.points[lat.sample(count, seed)]


def calc_for(bg, depth=2):
    return Calc(bg, depth=depth)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.criteria = {}


@pytest.fixture
def criterion(request):
    """Record an acceptance verdict; the terminal summary prints one line per criterion."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.criteria[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    if config.criteria:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number in sorted(config.criteria):
            terminalreporter.write_line(config.criteria[number])
