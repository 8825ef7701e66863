import numpy as np
import pytest

from robustface.attacks import AttackConfig
from robustface.augment import AugmentConfig
from robustface.dataset import generate_synthetic
from robustface.model import EncoderConfig, init_params
from robustface.pipeline import TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_ds():
    """4 identities x 4 images of 6 x 6 pixels."""
    return generate_synthetic(num_identities=4, images_per_identity=4, height=6, width=6, noise_sigma=0.05, seed=3)


@pytest.fixture
def tiny_config():
    return EncoderConfig(input_dim=36, hidden_dims=(12,), embed_dim=6, project_dim=4)


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=7)


@pytest.fixture
def tiny_train_config(tiny_config):
    return TrainConfig(
        epochs=2,
        batch_size=8,
        learning_rate=0.05,
        momentum=0.9,
        encoder=tiny_config,
        attack=AttackConfig(epsilon=8 / 255, alpha=2 / 255, iterations=2),
        augment=AugmentConfig(seed=5),
        triplets_per_epoch=16,
        seed=11,
    )


def away_from_kinks(rng, shape, kinks=(0.0,), margin=1e-3, low=-1.0, high=1.0):
    """Uniform samples with every coordinate at least ``margin`` from each kink."""
    x = rng.uniform(low, high, size=shape)
    for _ in range(100):
        near = np.zeros(shape, dtype=bool)
        for k in kinks:
            near |= np.abs(x - k) < margin
        if not near.any():
            return x
        x[near] = rng.uniform(low, high, size=int(near.sum()))
    raise RuntimeError("could not sample away from kinks")


@pytest.fixture
def kink_free():
    return away_from_kinks
