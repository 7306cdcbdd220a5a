import numpy as np
import pytest

from atlasrgd.optim import ParamStore


def perturb_params(store: ParamStore, rng: np.random.Generator, std=0.01):
    """Jitter every parameter; zero-initialized layers become active."""
    for p in store.params.values():
        p.value = p.value + rng.normal(0.0, std, p.value.shape)
    store._flat = None


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed after the test summary so the
# verdicts are visible even with output capture on
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
