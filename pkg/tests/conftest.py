"""Shared fixtures for the nowcast test suite"""

import numpy as np
import pytest

from nowcast.core.net import build_model, tiny_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture
def tiny_model(tiny):
    return build_model(tiny, seed=7)


@pytest.fixture
def tiny_batch(rng):
    """Two 70x70 input/target pairs in float64"""
    X = rng.normal(size=(2, 70, 70, 7))
    Y = rng.normal(size=(2, 70, 70, 6))
    return X, Y


@pytest.fixture
def make_patches(rng):
    """Factory for small learnable datasets: targets follow the newer inputs"""
    from nowcast.core.patches import PatchDataset

    def make(count, patch=58):
        X = rng.normal(size=(count, patch, patch, 7))
        Y = 0.5 * X[..., 1:] + rng.normal(scale=0.1, size=(count, patch, patch, 6))
        return PatchDataset(X, Y)

    return make
