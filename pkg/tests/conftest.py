import numpy as np
import pytest

from pevdn.field import PrimeField


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def f13():
    return PrimeField(13)


class ForcedMasks:
    """Stands in for a Generator so a test can dictate the share masks."""

    def __init__(self, *values):
        self.values = np.array(values, dtype=np.uint64)

    def integers(self, low, high, size=None, dtype=np.uint64):
        return self.values.reshape(size)


@pytest.fixture
def forced():
    return ForcedMasks


ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: int(k.split("-")[1])):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
