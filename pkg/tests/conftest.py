import numpy as np
import pytest

from mixedcbm.data import ConceptSchema, Dataset
from mixedcbm.predictor import ProbabilitySource

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def leaky_fixture():
    """16 rows, one concept.  c0=0 rows are class C; c0=1 rows split evenly
    between A and B, separable only by the soft probability (0.2 vs 0.8)."""
    schema = ConceptSchema(("c0",), (), (0,), ("A", "B", "C"))
    C = np.array([[0]] * 8 + [[1]] * 8)
    y = np.array([2] * 8 + [0] * 4 + [1] * 4)
    p = np.array([0.1] * 8 + [0.2] * 4 + [0.8] * 4)[:, None]
    ds = Dataset(np.zeros((16, 1)), C, y, schema)
    src = ProbabilitySource(schema, "seq", file_ids=np.arange(16), file_probs=p)
    return ds, src, p
