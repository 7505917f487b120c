import numpy as np
import pytest

from sgmq.stages.types import TrainConfig
from sgmq.tools.idx_data_tool import Dataset, dump_idx, normalize
from sgmq.tools.nn_engine_tool import Layer, Network
from sgmq.tools.sgm_regularizer_tool import LambdaSchedule


def make_dataset(n: int, seed: int = 0, side: int = 28, split_tag: str = "train") -> Dataset:
    """Random 8-bit images with balanced labels 0..9."""
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(n, 1, side, side)).astype(np.float64) / 255.0
    labels = np.arange(n, dtype=np.int64) % 10
    return Dataset(images=images, labels=labels, split_tag=split_tag)


def linear_network(weight, bias=None) -> Network:
    """Single linear layer wrapped as a Network."""
    weight = np.atleast_2d(np.asarray(weight, dtype=np.float64))
    bias = np.zeros(weight.shape[0]) if bias is None else np.asarray(bias, dtype=np.float64)
    return Network(layers=[Layer(kind="linear", name="fc", weight=weight, bias=bias)])


@pytest.fixture
def tiny_data():
    train, test = normalize(make_dataset(40, seed=1), make_dataset(20, seed=2, split_tag="test"))
    return train, test


@pytest.fixture
def mlp_config():
    return TrainConfig(
        arch="mlp",
        epochs=3,
        batch_size=16,
        lambda_schedule=LambdaSchedule(0.0, 1000.0, 3),
        seed=3,
        baseline_epochs=1,
        hist_every=1,
        switch_interval=1,
    ).validate()


@pytest.fixture
def mnist_dir(tmp_path):
    """Directory holding MNIST-named IDX files (40 train / 20 test images)."""
    data_dir = tmp_path / "mnist"
    data_dir.mkdir()
    dump_idx(make_dataset(40, seed=1), data_dir / "train-images-idx3-ubyte", data_dir / "train-labels-idx1-ubyte")
    dump_idx(make_dataset(20, seed=2), data_dir / "t10k-images-idx3-ubyte", data_dir / "t10k-labels-idx1-ubyte")
    return data_dir
