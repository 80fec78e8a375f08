import numpy as np
import pytest

from volseg.phantom import PhantomSpec

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_spec():
    """Phantoms that fit a 16^3 grid."""
    return PhantomSpec(size=16, count=1, seed=3, semi_axis_min=(2.5, 2.5, 2.5),
                       semi_axis_max=(3.5, 3.5, 3.5), gap=1.0, center_jitter=1.0)
