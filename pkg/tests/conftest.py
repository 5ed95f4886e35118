from __future__ import annotations

import numpy as np
import pytest

from mlaref import MlaWeights, get_model_preset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return get_model_preset("tiny")


@pytest.fixture
def tiny_weights(tiny_config):
    return MlaWeights.random(tiny_config, seed=7, dtype=np.float64)
