import numpy as np
import pytest

from cutvi.models import BiasedNormalModel

# (criterion, title, passed, detail, seconds), filled by test_acceptance
ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def demo_model():
    return BiasedNormalModel.demo(np.random.default_rng(2024))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for crit, title, ok, detail, secs in sorted(ACCEPTANCE_LINES, key=lambda r: r[0]):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {crit}: {title} ({secs:.1f} s) {detail}")
