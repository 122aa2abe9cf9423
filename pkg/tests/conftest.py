import numpy as np
import pytest

from rfdrl.synthrf import SynthConfig, synth_dataset
from rfdrl.trainer import TrainConfig, train

# acceptance lines collected by tests/test_acceptance.py, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def small_synth_config(**kw) -> SynthConfig:
    base = dict(length=64, snr_grid=(5.0, 15.0, 25.0), mod_families=("ASK", "PSK", "QAM"),
                k_tx=3, signals_per_cell=6, seed=3, impairment_scale=2.0)
    base.update(kw)
    return SynthConfig(**base)


@pytest.fixture(scope="session")
def small_dataset():
    return synth_dataset(small_synth_config())


@pytest.fixture(scope="session")
def small_trained(small_dataset):
    """A briefly trained model; enough for plumbing tests, not for quality claims."""
    return train(TrainConfig(epochs=2, batch_size=16, seed=1), small_dataset)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
