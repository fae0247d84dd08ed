import numpy as np
import pytest
import torch

from ncn.datasets import generate_dataset
from ncn.model import NcnModel

# keep CPU math reproducible and fair on small runners
torch.set_num_threads(2)


def make_model(seed=0, n=32, n_h=32):
    torch.manual_seed(seed)
    return NcnModel(latent_channels=n, hyper_channels=n_h).eval()


@pytest.fixture(scope="session")
def small_model():
    return make_model(seed=0)


@pytest.fixture(scope="session")
def tiny_model():
    return make_model(seed=1, n=16, n_h=16)


@pytest.fixture(scope="session")
def shapes_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("shapes")
    return generate_dataset(root, 60, 3, seed=11, size=128)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
