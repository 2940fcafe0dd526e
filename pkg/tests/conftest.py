import sys

import numpy as np
import pytest

from lesionforge.dataprep import synth_generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth16():
    return synth_generate(16, image_size=64, seed=0)


@pytest.fixture(scope="session")
def synth32():
    return synth_generate(32, image_size=64, seed=0)


def pytest_terminal_summary(terminalreporter):
    verdicts = getattr(sys.modules.get("test_acceptance"), "VERDICTS", [])
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for line in verdicts:
            terminalreporter.write_line(line)
