import numpy as np
import pytest

from dsie.network import Branch, Bus, MeasurementLayout, NetworkTopology
from dsie.simulation import potsdam_preset


def chain(n_branches=1, r=0.2, l=5e-3, omega=2 * np.pi * 60):
    buses = tuple(Bus(i) for i in range(1, n_branches + 2))
    branches = tuple(Branch(f"{i}-{i + 1}", i, i + 1, r * (1 + 0.3 * i), l * (1 + 0.1 * i))
                     for i in range(1, n_branches + 1))
    return NetworkTopology(buses, branches, omega)


@pytest.fixture
def one_branch():
    topo = chain(1)
    return topo, MeasurementLayout.full(topo)


@pytest.fixture
def two_branch():
    topo = chain(2)
    return topo, MeasurementLayout.full(topo)


@pytest.fixture(scope="session")
def potsdam():
    return potsdam_preset()


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
