import numpy as np
import pytest

from pathdetect import data, nn

from helpers import BLOB_CENTERS


@pytest.fixture(scope="session")
def blob_train():
    return data.make_blobs(150, BLOB_CENTERS, 0.06, seed=1, split="train")


@pytest.fixture(scope="session")
def blob_test():
    return data.make_blobs(100, BLOB_CENTERS, 0.06, seed=1001, split="test")


@pytest.fixture(scope="session")
def toy_net(blob_train):
    net, accuracy = nn.train_toy(blob_train, nn.mlp_arch([2, 16, 16, 3]),
                                 epochs=200, lr=1.0, seed=1)
    assert accuracy >= 0.99
    return net


@pytest.fixture()
def rng():
    return np.random.default_rng(20240811)
