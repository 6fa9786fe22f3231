import numpy as np
import pytest

from smspde.grid import build_grid


@pytest.fixture
def unit1d():
    return build_grid([(0.0, 1.0)], 101)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
