import numpy as np
import pytest

from structconv.graph import example_graph


@pytest.fixture
def g5():
    return example_graph()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
