import numpy as np
import pytest

from fddf.model import FddfModel
from fddf.synth import build_dataset
from fddf.training import TrainConfig, prepare_data, train


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    return build_dataset(16, root, seed=21, size=(32, 32))


@pytest.fixture(scope="session")
def tiny_data(tiny_corpus):
    return prepare_data(tiny_corpus)


@pytest.fixture(scope="session")
def tiny_model(tiny_data):
    model, _ = train(FddfModel(seed=5), tiny_data, TrainConfig(epochs=2, batch_size=8, seed=5))
    return model.eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
