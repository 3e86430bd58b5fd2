import numpy as np
import pytest

from lffn import imaging
from lffn.arch import NetworkSpec
from lffn.train import TrainConfig, train_loop

# Overfitting run shared by the smoke-training checks: a B1M2 x2 network
# memorising one 64x64 crop.
SMOKE_SPEC = NetworkSpec(blocks=1, modules=2, scale=2)
SMOKE_CONFIG = TrainConfig(batch=4, lr0=1.2e-2, iterations=500, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def smoke_crop():
    return imaging.synthetic_scene(64, 64, 0)


@pytest.fixture(scope="session")
def smoke(smoke_crop):
    return train_loop(SMOKE_SPEC, [smoke_crop], SMOKE_CONFIG)
