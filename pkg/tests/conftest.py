import numpy as np
import pytest

from mmfn.data import SyntheticSpec, generate_synthetic, make_splits
from mmfn.model import Dims

ACCEPTANCE_LINES: list[str] = []


def build_synthetic(n_items=200, noise=0.1, seed=0, val_fraction=0.1, test_fraction=0.2, dims=None):
    dims = dims or Dims.desk()
    records, features = generate_synthetic(SyntheticSpec(n_items=n_items, noise=noise, seed=seed), dims)
    split = make_splits(records, val_fraction, seed, test_fraction)
    split.features = features
    return split


@pytest.fixture
def synthetic():
    return build_synthetic


@pytest.fixture(autouse=True)
def _single_seeded_numpy():
    # guard against accidental use of the global RNG
    state = np.random.get_state()
    yield
    np.random.set_state(state)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
