import numpy as np
import pytest
import torch

from nfcsi.dataset import SamplingConfig, build_dataset


@pytest.fixture(scope="session")
def tiny_config():
    return SamplingConfig(seed=7, n_train=10, n_val=2, n_test=2)


@pytest.fixture(scope="session")
def tiny_bundle(tiny_config):
    return build_dataset(tiny_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
