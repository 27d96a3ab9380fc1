import numpy as np
import pytest

from patconv import extended_pattern_set


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def pset4():
    return extended_pattern_set(4)
