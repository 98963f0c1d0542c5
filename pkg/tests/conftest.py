import numpy as np
import pytest

from core.moe_layer import LayerConfig, init_layer
from harness.synthetic_tasks import make_pretrained_weight


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def w0():
    return make_pretrained_weight(16, 12, seed=3)


@pytest.fixture
def small_config():
    return LayerConfig(m=16, n=12, total_rank=8, n_experts=4, top_k=2)


@pytest.fixture
def small_layer(w0, small_config):
    return init_layer(w0, small_config, seed=5)
