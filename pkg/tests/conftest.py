import numpy as np
import pytest

from anticipative.corrkernel import linear_correlation, power_correlation, zero_correlation
from anticipative.models import LinearModel, scalar_demo_model

ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def demo_model():
    return scalar_demo_model()


@pytest.fixture
def scalar_classical():
    """``a = 0``, ``h = 1``, ``sigma0 = 1``, no correlation, ``Sigma = 1``."""
    corr = zero_correlation(1, 1, [[1.0]], 1.0)
    return LinearModel([[0.0]], [[1.0]], [[1.0]], corr, [0.0])


@pytest.fixture
def linear_unit():
    """``Sigma = 1``, ``rho(t) = t`` on ``[0, 0.9]``."""
    return linear_correlation([[1.0]], [[1.0]], 0.9)


@pytest.fixture
def quadratic_corr():
    """``Sigma = 2``, ``rho(t) = t^2`` on ``[0, 1]``."""
    return power_correlation([[1.0]], 2, [[2.0]], 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
