import numpy as np
import pytest

from stochtopo.gsm import run_gsm
from stochtopo.problems import three_bar_params, three_bar_problem


@pytest.fixture(scope="session")
def three_bar():
    return three_bar_problem()


@pytest.fixture(scope="session")
def three_bar_standard(three_bar):
    return run_gsm(three_bar, "standard", three_bar_params())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one PASS/FAIL line per acceptance criterion."""

    def report(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append((number, line))
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
