import numpy as np
import pytest

from relaxpa.measure import TimeGrid, build_intensity_grid, simulate_base_measure
from relaxpa.models import brownian_model, lq_hamiltonian, lq_model


@pytest.fixture(scope="session")
def lq():
    model = lq_model()
    return model, lq_hamiltonian(model)


@pytest.fixture(scope="session")
def small_noise():
    """2000 paths, 20 steps, 8 cells, k = 1."""
    return simulate_base_measure(build_intensity_grid(8), TimeGrid(1.0, 20), 1, 2000, seed=11)


@pytest.fixture(scope="session")
def bm():
    return brownian_model()


def within(est, se, target, band=3.0):
    return abs(est - target) <= band * se + 1e-12


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from tests.test_acceptance import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
