import numpy as np
import pytest

from hierflow.hierarchy import build_tree
from hierflow.data import synthetic_tree

TREE7_EDGES = [("A", "B"), ("A", "C"), ("B", "D"), ("B", "E"), ("C", "F"), ("C", "G")]
TREE7_S = np.array(
    [
        [1, 1, 1, 1],
        [1, 1, 0, 0],
        [0, 0, 1, 1],
        [1, 0, 0, 0],
        [0, 1, 0, 0],
        [0, 0, 1, 0],
        [0, 0, 0, 1],
    ]
)


@pytest.fixture
def tree7():
    return build_tree(TREE7_EDGES)


@pytest.fixture
def tree21():
    return synthetic_tree(2, 4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria register a one-line verdict here; printed at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
