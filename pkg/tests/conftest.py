import numpy as np
import pytest

from xattn.config import ModelConfig, ScenegenParams
from xattn.detector import random_init
from xattn.scenegen import generate_scene

TINY = ModelConfig(
    n_c=2, n_l=2, n_h=2, n_q=4, d=16, grid_h=2, grid_w=4, patch=4, n_classes=3, threshold=0.3
)


@pytest.fixture(scope="session")
def tiny_cfg() -> ModelConfig:
    return TINY


@pytest.fixture(scope="session")
def tiny_scene():
    params = ScenegenParams.for_model(TINY, n_objects=2, radius_min=0.1, radius_max=0.2)
    return generate_scene(7, params)


@pytest.fixture(scope="session")
def tiny_weights():
    return random_init(3, TINY)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
