import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT))

from sgfopt.grid import Grid, make_grid  # noqa: E402


@pytest.fixture
def grid17() -> Grid:
    return make_grid(17, 17)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
