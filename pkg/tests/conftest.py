"""Shared fixtures: tiny networks and small moons pairs keep every test fast."""

from __future__ import annotations

import numpy as np
import pytest

from services.data.synthetic import make_moons_pair
from services.trainer.networks import ModelSet
from shared.schemas import DataConfig, NetworkWidths, RunConfig

TINY_WIDTHS = NetworkWidths(
    encoder_hidden=8,
    encoder_layers=1,
    latent_dim=3,
    noise_dim=2,
    decoder_hidden=8,
    decoder_layers=1,
    classifier_hidden=6,
    discriminator_hidden=8,
    discriminator_layers=1,
    feature_dim=4,
)


@pytest.fixture
def widths() -> NetworkWidths:
    return TINY_WIDTHS


@pytest.fixture
def models(widths) -> ModelSet:
    return ModelSet.build(2, 2, widths, np.random.default_rng(0))


@pytest.fixture
def moons_pair():
    return make_moons_pair(200, noise=0.1, shift=30.0, seed=3)


@pytest.fixture
def small_config(widths) -> RunConfig:
    return RunConfig(
        epochs=2,
        batch_size=32,
        seed=5,
        checkpoint_every=1,
        network=widths,
        data=DataConfig(task="moons", n=200, shift="30"),
    )
