import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from trisplm.mesh import make_triangulation  # noqa: E402
from trisplm.simbench import square_mesh  # noqa: E402


@pytest.fixture
def tri1():
    return make_triangulation([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]])


@pytest.fixture
def square2():
    return make_triangulation([[0, 0], [1, 0], [1, 1], [0, 1]], [[0, 1, 2], [0, 2, 3]])


@pytest.fixture
def square32():
    return square_mesh(4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)



ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL/SKIP line per acceptance criterion."""

    def record(number, status, detail):
        line = f"criterion {number:>2}: {status} - {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return status == "PASS"

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
