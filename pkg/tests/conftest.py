import numpy as np
import pytest

from switchlq.instances import markov_instance, nonmarkov_instance, scalar_benchmark
from switchlq.riccati import solve_riccati_direct


@pytest.fixture(scope="session")
def scalar():
    inst = scalar_benchmark()
    return inst, solve_riccati_direct(inst.coeffs, inst.law, inst.grid)


@pytest.fixture(scope="session")
def markov():
    inst = markov_instance()
    return inst, solve_riccati_direct(inst.coeffs, inst.law, inst.grid)


@pytest.fixture(scope="session")
def nonmarkov():
    inst = nonmarkov_instance()
    return inst, solve_riccati_direct(inst.coeffs, inst.law, inst.grid)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
