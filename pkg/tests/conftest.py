import os

import numpy as np
import pytest

from msnlab.data import Dataset

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
BUNDLED_MNIST = os.path.join(ROOT, "data", "mnist5k")


@pytest.fixture(scope="session")
def mnist_dir():
    path = os.environ.get("MSNLAB_DATA_DIR") or BUNDLED_MNIST
    if not os.path.isdir(path):
        pytest.skip(f"no MNIST IDX files at {path}")
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_images():
    """A 60-sample synthetic 10-class image set (class = bright column)."""
    rng = np.random.default_rng(7)
    labels = np.repeat(np.arange(10), 6)
    images = 0.1 * rng.random((60, 1, 28, 28))
    for i, c in enumerate(labels):
        images[i, 0, :, 2 + 2 * c] = 1.0
    return Dataset(images, labels)


SCHEMES_UNDER_TEST = ("bn", "sn", "msn")
SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def mnist_runs(mnist_dir, tmp_path_factory):
    """cnn3 on a 2000/500 MNIST subset, lr 1e-3, 5 epochs, for every scheme and seed.

    Returns ``{(scheme, seed): RunArtifacts}``.  Shared by the acceptance suite
    and the training invariants so the nine runs happen once per session.
    """
    from msnlab.train import ExperimentConfig, load_data, train

    root = tmp_path_factory.mktemp("mnist_runs")
    runs = {}
    for seed in SEEDS:
        data = None
        for scheme in SCHEMES_UNDER_TEST:
            cfg = ExperimentConfig(model="cnn3", norm=scheme, data_dir=mnist_dir, subset=2000, test_subset=500,
                                   lr=1e-3, epochs=5, seed=seed, track_sigma=(scheme == "msn" and seed == 0),
                                   out=str(root / f"{scheme}_seed{seed}"))
            data = data or load_data(cfg)
            runs[(scheme, seed)] = train(cfg, *data)
    return runs
