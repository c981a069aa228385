import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from symcdm.dataset import QMatrix, ResponseDataset, generate_synthetic
from symcdm.trainer import make_initial_tree


@pytest.fixture
def initial_tree():
    return make_initial_tree()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_dataset():
    """6 students, 4 exercises, 3 attributes, full coverage."""
    ds, _ = generate_synthetic(6, 4, 3, density=0.6, seed=7)
    return ds


@pytest.fixture
def small_synthetic():
    """Well-specified recovery benchmark: 200 students, 20 exercises,
    8 attributes, every student answers every exercise."""
    return generate_synthetic(200, 20, 8, density=0.4, seed=11)


class ScriptedRng:
    """Duck-typed generator stub returning queued values, for forcing
    specific branch choices inside genetic operators."""

    def __init__(self, randoms=(), integers=()):
        self._randoms = list(randoms)
        self._integers = list(integers)

    def random(self):
        return self._randoms.pop(0)

    def integers(self, *args, **kwargs):
        return self._integers.pop(0)


@pytest.fixture
def scripted_rng_cls():
    return ScriptedRng
