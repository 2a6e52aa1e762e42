import numpy as np
import pytest
from datetime import date, timedelta

from chainpde.chainlet_data import GRID, DailyChainletMatrix


def day(offset, start=date(2017, 1, 1)):
    return start + timedelta(days=offset)


def matrix_day(d, cells):
    """cells: {(inputs, outputs): (occurrence, amount)}"""
    occ = np.zeros((GRID, GRID), dtype=np.int64)
    amt = np.zeros((GRID, GRID))
    for (i, j), (o, a) in cells.items():
        occ[i - 1, j - 1] = o
        amt[i - 1, j - 1] = a
    return DailyChainletMatrix(d, occ, amt)


@pytest.fixture(scope="session")
def small_synth():
    from chainpde.forecasting import generate_synthetic

    return generate_synthetic(days=12, seed=5)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
