import numpy as np
import pytest

from leakbench.corpus import SynthConfig, generate_synthetic, split
from leakbench.textmodel import ModelConfig, TrainConfig
from leakbench.victim import train_victim

# Acceptance tests append "(criterion, passed, detail)" here; the summary
# hook prints one line per criterion even when output capture is on.
ACCEPTANCE_RESULTS = []

SMALL_MODEL = ModelConfig(feature_dim=256, hidden_dims=(16,), num_classes=4, seed=0)
SMALL_TRAIN = TrainConfig(epochs=3, learning_rate=1e-2, batch_size=32, seed=0)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic(SynthConfig(size=400, seed=3))


@pytest.fixture(scope="session")
def small_split(small_corpus):
    test = generate_synthetic(SynthConfig(size=100, seed=4, domain_tag="test"))
    return split(small_corpus, seed=0, test=test)


@pytest.fixture(scope="session")
def small_victim(small_split):
    return train_victim(small_split.victim, SMALL_MODEL, SMALL_TRAIN, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for crit, ok, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: int(r[0].lstrip("C"))):
        terminalreporter.write_line(f"{crit:>4} {'PASS' if ok else 'FAIL'}  {detail}")
