"""Shared fixtures and deterministic hypothesis settings."""

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "ci",
    derandomize=True,
    max_examples=50,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_dataset():
    """8 classes in 6-D, tight blobs: trivially separable."""
    from fedss.data import SyntheticDatasetSpec, generate_synthetic

    spec = SyntheticDatasetSpec(
        n_classes=8, input_dim=6, samples_per_class=10, noise_sigma=0.05, seed=3
    )
    return generate_synthetic(spec)


@pytest.fixture
def small_model():
    from fedss.federation import init_rng
    from fedss.model import ModelConfig, init_model

    config = ModelConfig(input_dim=6, hidden_dims=(12,), embedding_dim=8, n_classes=8)
    return init_model(config, init_rng(0)), config
