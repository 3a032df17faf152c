import numpy as np
import pytest

from ma2t.driving import DatasetConfig, build_dataset, build_reference_model
from ma2t.trainer import TrainConfig, pretrain_clean


@pytest.fixture(scope="session")
def small_data():
    """(train, val) split of 150 scenarios."""
    return build_dataset(DatasetConfig(seed=0, n_scenarios=150))


@pytest.fixture(scope="session")
def batch(small_data):
    train, _ = small_data
    return train.batch(np.arange(8))


@pytest.fixture
def model():
    return build_reference_model(0)


@pytest.fixture(scope="session")
def pretrained(small_data):
    """A briefly trained checkpoint; treat as read-only."""
    train, _ = small_data
    return pretrain_clean(train, TrainConfig("clean", epochs=2, seed=0)).checkpoint
