import numpy as np
import pytest

from libragrad.models import LayerSpec, build_mixer, build_vit
from libragrad.rng import Rng

TOY = LayerSpec(dim=16, heads=2, tokens=8, depth=2)


@pytest.fixture(scope="session")
def vit():
    return build_vit(TOY, seed=0)


@pytest.fixture(scope="session")
def mixer():
    return build_mixer(TOY, seed=0)


@pytest.fixture
def x_toy():
    return Rng(1).normal((TOY.tokens, TOY.dim))


def draws(n, shape, seed=0, stream0=0):
    return [Rng(seed, stream=stream0 + i).normal(shape) for i in range(n)]


def assert_close(a, b, rtol=0.0, atol=0.0):
    np.testing.assert_allclose(a, b, rtol=rtol, atol=atol)
