import logging

import numpy as np
import pytest
import torch

from jesvc.data.synthetic import generate_synthetic_corpus


@pytest.fixture(autouse=True)
def _quiet_logs():
    logging.getLogger("jesvc").setLevel(logging.ERROR)
    yield


@pytest.fixture(scope="session")
def tiny_corpus():
    """2 speakers x 2 emotions x 8 utterances, in memory."""
    return generate_synthetic_corpus(2, 2, 8, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def torch_seed():
    torch.manual_seed(0)
    yield


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
