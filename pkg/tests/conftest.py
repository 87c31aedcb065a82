import numpy as np
import pytest

import garnn.model as model_mod

ROW_SUM_TOL = 1e-12


class RowSumAudit:
    """Every graph-layer call made during the session has its softmax rows checked."""

    def __init__(self):
        self.calls = 0
        self.rows = 0
        self.max_dev = 0.0

    def check(self, weights: np.ndarray) -> None:
        dev = float(np.max(np.abs(weights.sum(axis=-1) - 1.0))) if weights.size else 0.0
        self.calls += 1
        self.rows += weights.size // max(weights.shape[-1], 1)
        self.max_dev = max(self.max_dev, dev)
        assert dev <= ROW_SUM_TOL, f"attention rows sum to 1 only within {dev:.3e}"


AUDIT = RowSumAudit()
_layer_forward = model_mod.graph_layer_forward


def _audited_layer_forward(e, layer):
    out, record = _layer_forward(e, layer)
    AUDIT.check(record.weights)
    return out, record


model_mod.graph_layer_forward = _audited_layer_forward


@pytest.fixture
def row_audit():
    return AUDIT


def pytest_terminal_summary(terminalreporter):
    terminalreporter.write_line(
        f"attention row-sum audit: {AUDIT.calls} layer passes, {AUDIT.rows} softmax rows, "
        f"max |sum - 1| = {AUDIT.max_dev:.3e}")
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_collection_modifyitems(config, items):
    # the acceptance module reads the suite-wide row-sum audit, so it goes last
    items.sort(key=lambda item: item.path.name == "test_acceptance.py")
