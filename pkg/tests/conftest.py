import numpy as np
import pytest

from olrsim.core import generate_dataset


@pytest.fixture
def small_world():
    """Six prompts, four answers, two skills, 8-dimensional features."""
    return generate_dataset(6, 4, 2, 0.5, 8, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from acceptance_log import RESULTS, line
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(line(n))
