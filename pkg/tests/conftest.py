import numpy as np
import pytest

# (criterion number, title, passed, detail) recorded by the acceptance suite
ACCEPTANCE_RESULTS = []


@pytest.fixture
def rng():
    return np.random.default_rng(20261014)


@pytest.fixture
def record():
    def _record(number, title, passed, detail=""):
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE_RESULTS.append((number, line))
        print(line)
        return passed
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(line)
