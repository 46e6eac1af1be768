import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_dataset():
    from msp_reid.data import SyntheticConfig, generate_synthetic_dataset

    return generate_synthetic_dataset(SyntheticConfig(
        num_identities=4, clothes_per_identity=2, hairstyles_per_identity=2,
        images_per_combination=2, noise_std=0.02, seed=3, num_test_identities=2))
