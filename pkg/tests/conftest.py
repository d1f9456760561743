from pathlib import Path

import numpy as np
import pytest

DATA = Path(__file__).parent / "data"
MNIST_IMAGES = DATA / "mnist5k-images-idx3-ubyte.gz"
MNIST_LABELS = DATA / "mnist5k-labels-idx1-ubyte.gz"

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist():
    from neuralmaps.data import load_idx
    return load_idx(MNIST_IMAGES, MNIST_LABELS)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
