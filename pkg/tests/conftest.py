import numpy as np
import pytest

from disq.dataio import SyntheticSpec, generate_synthetic
from disq.model import TrainConfig
from disq.sweep import CodebookCache, load_dataset


def tiny_spec(**overrides) -> SyntheticSpec:
    """Small but trainable dataset: 4 layers, strong last layer, prosody signal."""
    kwargs = dict(
        n_per_class=14,
        layer_count=4,
        feature_dim=12,
        t_range=(10, 16),
        layer_informativeness=(0.1, 0.3, 0.6, 1.0),
        paralinguistic_gain=2.0,
        noise_sigma=0.8,
        seed=42,
    )
    kwargs.update(overrides)
    return SyntheticSpec(**kwargs)


def tiny_train_config(**overrides) -> TrainConfig:
    kwargs = dict(epochs=6, batch_size=8, hidden=32, learning_rate=1e-3, seed=0)
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_dataset")
    generate_synthetic(tiny_spec(), root)
    return load_dataset(root)


@pytest.fixture(scope="session")
def tiny_cache():
    return CodebookCache()


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
