"""Shared fixtures for the sslkit test suite."""

import numpy as np
import pytest

from sslkit.cache import feature_cache
from sslkit.config import EncoderConfig, TrainConfig
from sslkit.data import generate_synthetic
from sslkit.models import SyntheticClassSpec, SyntheticSpec


@pytest.fixture(autouse=True)
def clear_feature_cache():
    """Every test starts with an empty frozen-feature cache."""
    feature_cache.clear()
    yield
    feature_cache.clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_encoder_config():
    """Small encoder for 8x8 images."""
    return EncoderConfig(input_height=8, input_width=8, channels=(4, 6), d_emb=8)


@pytest.fixture
def tiny_spec():
    """Three well separated classes of 8x8 blobs."""
    return SyntheticSpec(
        classes=[
            SyntheticClassSpec(name="red", count=12, color=(0.95, 0.05, 0.05), shape="disk"),
            SyntheticClassSpec(name="green", count=8, color=(0.05, 0.95, 0.05), shape="square"),
            SyntheticClassSpec(name="blue", count=4, color=(0.05, 0.05, 0.95), shape="diamond"),
        ],
        image_size=8,
        radius=0.35,
        noise=0.02,
    )


@pytest.fixture
def tiny_dataset(tiny_spec):
    return generate_synthetic(tiny_spec, seed=0)


@pytest.fixture
def tiny_train_config(tiny_encoder_config):
    """Two-epoch configuration sized for the tiny dataset."""
    return TrainConfig(
        epochs=2,
        batch_size=8,
        learning_rate=0.05,
        n_prototypes=6,
        d_proj=4,
        queue_capacity=16,
        queue_start_epoch=2,
        prototype_freeze_epochs=1,
        encoder=tiny_encoder_config,
    )
