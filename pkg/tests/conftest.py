from pathlib import Path

import numpy as np
import pytest

from soe.latentdiff import DenoiserModel, ModelConfig, make_schedule
from soe.shapes import train_toy

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def toy():
    """The CLI's default toy model: 200 Adam steps, seed 7."""
    model, losses = train_toy()
    return model, losses


@pytest.fixture(scope="session")
def small_model():
    """Random-weight 4-layer model on an 8x8 latent (64x64 images)."""
    cfg = ModelConfig(latent_hw=8, timesteps=10, pyramid=(8, 4, 4, 8))
    return DenoiserModel.init(cfg, seed=3)


@pytest.fixture
def small_sched():
    return make_schedule(10)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
