import numpy as np
import pytest

from kbfgs.data import export_mnist_subset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist_subset(tmp_path_factory):
    """IDX files for the 5,000-image MNIST sample bundled with mlxtend."""
    pytest.importorskip("mlxtend")
    return export_mnist_subset(tmp_path_factory.mktemp("mnist"))


def random_spd(rng, d, shift=1.0):
    m = rng.standard_normal((d, d))
    return m.T @ m + shift * np.eye(d)
