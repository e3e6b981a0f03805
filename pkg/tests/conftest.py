import numpy as np
import pytest

from litm.data import SynthConfig, generate
from litm.model import ModelConfig, init_params
from litm.numeric import RandomSource

ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(line)


@pytest.fixture
def small_cfg():
    return ModelConfig(d_in=5, hidden_dims=(6, 5, 4), d_emb=3, M=2)


@pytest.fixture
def small_params(small_cfg):
    params = init_params(small_cfg, RandomSource(3))
    rng = RandomSource(4)
    # non-zero biases so every code path carries signal
    return {k: (rng.normal(0, 0.2, v.shape) if "bias" in k else v) for k, v in params.items()}


@pytest.fixture
def bag_batch():
    rng = RandomSource(11)
    X = rng.normal(0, 0.7, size=(6, 3, 5))
    labels = np.array([0, 0, 1, 1, 2, 2])
    return X, labels


@pytest.fixture(scope="session")
def twin_dataset():
    return generate(SynthConfig(n_ids=24, samples_per_id=4, d_in=8, R=3, seed=5))
