import pytest

from seqfuse import tensor as T
from seqfuse.encoder import ENCODER_STATS


@pytest.fixture
def f64():
    with T.precision("f64"):
        yield


@pytest.fixture
def f32():
    with T.precision("f32"):
        yield


@pytest.fixture(autouse=True)
def _reset_counter():
    ENCODER_STATS.reset()
    yield


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
