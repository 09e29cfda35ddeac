import numpy as np
import pytest

from radjump.chip import ChipLayout, default_layout
from radjump.simulator import SimConfig


@pytest.fixture(scope="session")
def layout():
    return default_layout()


@pytest.fixture
def line_layout():
    """Three qubits on a line, 1 mm apart."""
    return ChipLayout.from_positions({0: (0.0, 0.0), 1: (1.0, 0.0), 2: (2.0, 0.0)})


@pytest.fixture
def short_config():
    """A 4.4 s run: same physics as the default, a tenth of the repetitions."""
    return SimConfig(n_reps=100_000, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
