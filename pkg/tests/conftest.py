import numpy as np
import pytest

from femda.fem import build_fe_space
from femda.mesh import build_uniform_tri_mesh


@pytest.fixture
def unit_mesh8():
    return build_uniform_tri_mesh(8, 8)


@pytest.fixture
def p2_space8(unit_mesh8):
    return build_fe_space(unit_mesh8, 2, 1, ("Gamma1",))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
