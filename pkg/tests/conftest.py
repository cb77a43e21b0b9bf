import numpy as np
import pytest

from scalebio.problems import QuadraticInstance, SourceSpec, gen_sources, make_quadratic, planted_parameter


@pytest.fixture
def quad():
    return make_quadratic(3, 5, 1.0, seed=0)


@pytest.fixture
def quad1d():
    """A=2, B=1, C=1, y=1, rho=0."""
    return QuadraticInstance([[2.0]], [[1.0]], [[1.0]], [1.0])


@pytest.fixture
def two_source_cls():
    w = planted_parameter(3, [0, 1], num_classes=2)
    train = gen_sources([SourceSpec(6, w), SourceSpec(4, w, corruption=0.5)], seed=0)
    val = gen_sources([SourceSpec(8, w)], seed=1)
    return train, val


def rng(seed=0):
    return np.random.default_rng(seed)
