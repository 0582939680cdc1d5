import numpy as np
import pytest

from glamor.data import generate_synthetic_dataset
from glamor.model import ModelConfig


@pytest.fixture
def tiny_config():
    """Reduced-width network: channels [2,2,2,2,4], feature dim 4, K=3, 16x16 / 32x32 inputs."""
    return ModelConfig(channels=(2, 2, 2, 2, 4), hidden=4, n_classes=3, face_size=(16, 16),
                       context_size=(32, 32), dropout=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_corpus(tmp_path_factory):
    """The 7 x 10 synthetic corpus at seed 0."""
    out = tmp_path_factory.mktemp("synth")
    path, records = generate_synthetic_dataset(10, str(out), seed=0)
    return path, records


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
