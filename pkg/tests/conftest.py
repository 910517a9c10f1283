"""Shared fixtures: a tiny U-Net, a short schedule and seeded generators."""

import numpy as np
import pytest

from doda.sde import NoiseSchedule
from doda.UNet import UNetConfig

#: Smallest architecture that still has two levels and one attention site.
TINY_UNET = UNetConfig(base_channels=8, channel_multipliers=(1, 2), attention_resolutions=(2,), num_heads=2,
                       image_size=8, token_dim=8, attention_dim=8, groups=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return TINY_UNET


@pytest.fixture
def schedule():
    return NoiseSchedule(T=50)


@pytest.fixture
def tiny_batch(rng):
    """Images, domain tokens and layout rasters for two items of the tiny model."""
    x = rng.standard_normal((2, 3, 8, 8))
    tokens = rng.standard_normal((2, 4, TINY_UNET.token_dim))
    layout = (rng.random((2, 3, 8, 8)) > 0.7).astype(np.float64)
    return x, tokens, layout
