import numpy as np
import pytest

from errwhiten.experiments.data import write_idx_images, write_idx_labels


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    """The 5,000-digit MNIST sample shipped with mlxtend, written as IDX files.

    Rows come sorted by class, so they are shuffled with a fixed seed before a
    4,000 / 1,000 train/test split.
    """
    mlxtend_data = pytest.importorskip("mlxtend.data")
    X, y = mlxtend_data.mnist_data()
    order = np.random.default_rng(0).permutation(len(y))
    X = np.asarray(X, dtype=np.uint8)[order].reshape(-1, 28, 28)
    y = np.asarray(y, dtype=np.uint8)[order]
    d = tmp_path_factory.mktemp("mnist")
    write_idx_images(d / "train-images-idx3-ubyte", X[:4000])
    write_idx_labels(d / "train-labels-idx1-ubyte", y[:4000])
    write_idx_images(d / "t10k-images-idx3-ubyte", X[4000:])
    write_idx_labels(d / "t10k-labels-idx1-ubyte", y[4000:])
    return d
