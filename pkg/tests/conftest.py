import numpy as np
import pytest
import torch

from inade.data import ShapesConfig, generate_shapes
from inade.networks import ModelConfig


def tiny_model_config(**overrides) -> ModelConfig:
    """Small 64x64 config that keeps CPU tests quick."""
    base = dict(height=64, width=64, num_classes=4, gen_base_width=8, gen_max_width=32,
                disc_base_width=16, disc_max_width=64, encoder_widths=(8, 16, 32),
                latent_channels=64, noise_channels=16)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def shapes12():
    return generate_shapes(ShapesConfig(image_size=64, dataset_size=12, seed=5))


@pytest.fixture(scope="session")
def shapes_small():
    return generate_shapes(ShapesConfig(image_size=32, dataset_size=6, seed=9))


@pytest.fixture(autouse=True)
def _fixed_global_seed():
    # Module constructors that fall back to the global RNG stay reproducible.
    torch.manual_seed(0)
    np.random.seed(0)
