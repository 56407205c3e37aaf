import logging

import numpy as np
import pytest
import torch

from mvtryon.camera import CameraConfig, CameraIntrinsics, uniform_rig
from mvtryon.diffusion import DenoiserConfig, ToyDenoiser
from mvtryon.synthdata import SynthConfig, make_item

logger = logging.getLogger(__name__)

torch.set_default_dtype(torch.float64)


def pytest_addoption(parser):
    parser.addoption(
        "--runslow",
        action="store_true",
        default=False,
        help="run slow acceptance experiments",
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: slow acceptance experiment")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_synth():
    """16x16 images keep sphere tracing and denoising fast."""
    return SynthConfig(camera=CameraConfig(width=16, height=16, focal=20.0))


@pytest.fixture
def small_intrinsics(small_synth):
    return small_synth.intrinsics


@pytest.fixture
def small_model():
    return ToyDenoiser(
        DenoiserConfig(
            width=16,
            height=16,
            patch=4,
            hidden=8,
            head_dim=4,
            blocks=1,
            embed_dim=49,
            encoding_length=1,
            mlp_hidden=4,
        )
    )


@pytest.fixture
def small_item(small_synth):
    return make_item(0, 4, seed=3, config=small_synth)


@pytest.fixture
def small_rig(small_intrinsics):
    return uniform_rig(4, 2.5, 0.0, small_intrinsics)


@pytest.fixture
def square_intrinsics():
    return CameraIntrinsics.centered(32, 32, 40.0)
