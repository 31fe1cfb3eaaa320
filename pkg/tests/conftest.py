import numpy as np
import pytest

from xailoop.harness import SynthDatasetConfig, split_dataset, synthesize_dataset
from xailoop.refmodel import RefModelAdapter, TrainConfig, train_model

THREE = ("Basal", "LuminalA", "LuminalB")


@pytest.fixture(scope="session")
def small_corpus():
    config = SynthDatasetConfig(active_classes=THREE, per_class_count=15, seed=7)
    return synthesize_dataset(config)


@pytest.fixture(scope="session")
def small_split(small_corpus):
    return split_dataset(small_corpus, seed=3)


@pytest.fixture(scope="session")
def trained_model(small_split):
    model, history = train_model(
        [(s.image, s.label) for s in small_split.train],
        [(s.image, s.label) for s in small_split.validation],
        TrainConfig(dropout_rate=0.15, learning_rate=0.08, batch_size=8, epochs=10, seed=0),
        THREE,
    )
    return model


@pytest.fixture(scope="session")
def trained_adapter(trained_model):
    return RefModelAdapter(trained_model)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
