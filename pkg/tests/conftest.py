import numpy as np
import pytest

from facegaze.synth import make_test_model

# criterion lines collected by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def small_model():
    return make_test_model(400, 4, seed=3)


@pytest.fixture(scope="session")
def face_model():
    return make_test_model(2500, 6, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
