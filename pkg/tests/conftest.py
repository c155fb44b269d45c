import numpy as np
import pytest
from hypothesis import settings

from radtex import tensor as T

settings.register_profile("radtex", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("radtex")


@pytest.fixture(autouse=True)
def fresh_tape():
    T.reset_tape()
    yield
    T.reset_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
