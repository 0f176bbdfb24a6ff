import numpy as np
import pytest

from accmv.data import build_strata
from accmv.simgen import SimDesign, generate

ACCEPTANCE_LINES = []


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def single_20k():
    ds = generate(SimDesign("single", 20000, 424242))
    return ds, build_strata(ds)


@pytest.fixture(scope="session")
def multiple_20k():
    ds = generate(SimDesign("multiple", 20000, 424243))
    return ds, build_strata(ds)


@pytest.fixture(scope="session")
def mpm_2k():
    ds = generate(SimDesign("mpm", 2000, 424244))
    return ds, build_strata(ds)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(8675309)
