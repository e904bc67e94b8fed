import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from weathercnn.data import build_synthetic_dataset  # noqa: E402
from weathercnn.numerics import Rng  # noqa: E402


@pytest.fixture(scope="session")
def tc_small():
    return build_synthetic_dataset("tc", 20, 20, Rng(11))


@pytest.fixture(scope="session")
def wf_small():
    return build_synthetic_dataset("wf", 10, 10, Rng(12))


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)
