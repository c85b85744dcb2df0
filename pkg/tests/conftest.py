import numpy as np
import pytest

from weighted_ensembles.model import sys_a, sys_b, sys_c, unweighted

# bands at which the reference systems meet the 1e-9 / 1e-10 identities
REFERENCE_BANDS = {"sys-a": 24, "sys-b": 24, "sys-c": 32}


@pytest.fixture(scope="session")
def model_a():
    return sys_a(REFERENCE_BANDS["sys-a"])


@pytest.fixture(scope="session")
def model_b():
    return sys_b(REFERENCE_BANDS["sys-b"])


@pytest.fixture(scope="session")
def model_c():
    return sys_c(REFERENCE_BANDS["sys-c"])


@pytest.fixture(scope="session")
def model_flat():
    return unweighted([1.0], [2.0], band=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
