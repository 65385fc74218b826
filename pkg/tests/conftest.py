import warnings

import numpy as np
import pytest

from multiscene import network, synthetic
from multiscene.tensor import Tensor

warnings.filterwarnings("ignore", message=".*not divisible.*")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_config():
    """4x4-input model small enough for exhaustive gradient checks."""
    return network.EncoderConfig(image_size=4, stage_channels=(4, 8, 16, 32))


@pytest.fixture
def toy_bundle(toy_config):
    return network.init_params(toy_config, (3, 4), seed=7)


@pytest.fixture
def toy_batch(rng):
    return Tensor(rng.random((3, 3, 4, 4), dtype=np.float64).astype(np.float32))


@pytest.fixture(scope="session")
def small_data():
    """Small but complete dataset bundle shared by the slower tests."""
    cfg = synthetic.GeneratorConfig(train_size=96, val_size=48, test_size=96,
                                    joint_size=160)
    return synthetic.generate_bundle(cfg, seed=0)
