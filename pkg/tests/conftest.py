import numpy as np
import pytest

from gutseg import dataset as dataset_io
from gutseg import fixture


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_dataset(tmp_path):
    """4 cases x 1 day x 2 slices of 64x64 synthetic data."""
    root = tmp_path / "data"
    fixture.generate(root, cases=4, days=1, slices=2, height=64, width=64, seed=0)
    return root


@pytest.fixture
def tiny_index(tiny_dataset):
    return dataset_io.ingest(tiny_dataset, tiny_dataset / "train.csv")
