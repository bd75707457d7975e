import struct

import numpy as np
import pytest

from kbfgs.data import (
    BatchSampler,
    Dataset,
    load_csv,
    load_idx,
    read_idx,
    synthetic_autoencoder,
    write_idx,
)
from kbfgs.errors import ConfigError, FormatError


def write_raw(path, payload):
    path.write_bytes(payload)
    return path


def test_idx_hand_file(tmp_path):
    raw = struct.pack(">HBB", 0, 0x08, 3) + struct.pack(">III", 1, 2, 2) + bytes([0, 255, 0, 255])
    ds = load_idx(write_raw(tmp_path / "x.idx", raw))
    np.testing.assert_array_equal(ds.inputs, [[0.0, 1.0, 0.0, 1.0]])
    np.testing.assert_array_equal(ds.targets, ds.inputs)


@pytest.mark.parametrize("payload", [
    b"",
    b"\x00\x00",
    struct.pack(">HBB", 1, 0x08, 1) + struct.pack(">I", 1) + b"\x00",
    struct.pack(">HBB", 0, 0x07, 1) + struct.pack(">I", 1) + b"\x00",
    struct.pack(">HBB", 0, 0x08, 3) + struct.pack(">I", 1),
    struct.pack(">HBB", 0, 0x08, 3) + struct.pack(">III", 1, 2, 2) + bytes([0, 255, 0]),
])
def test_idx_malformed(tmp_path, payload):
    with pytest.raises(FormatError):
        read_idx(write_raw(tmp_path / "bad.idx", payload))


def test_idx_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, size=(7, 3, 4), dtype=np.uint8)
    write_idx(tmp_path / "a.idx", img)
    np.testing.assert_array_equal(read_idx(tmp_path / "a.idx"), img)
    flt = rng.standard_normal((5, 2))
    write_idx(tmp_path / "b.idx", flt)
    np.testing.assert_array_equal(read_idx(tmp_path / "b.idx"), flt)


def test_idx_gzip(tmp_path):
    import gzip

    raw = struct.pack(">HBB", 0, 0x08, 2) + struct.pack(">II", 1, 2) + bytes([51, 102])
    (tmp_path / "x.gz").write_bytes(gzip.compress(raw))
    np.testing.assert_allclose(load_idx(tmp_path / "x.gz").inputs, [[0.2, 0.4]])


def test_idx_labels_one_hot(tmp_path):
    write_idx(tmp_path / "x", np.zeros((3, 2, 2), dtype=np.uint8))
    write_idx(tmp_path / "y", np.array([0, 2, 1], dtype=np.uint8))
    ds = load_idx(tmp_path / "x", as_autoencoder=False, labels_path=tmp_path / "y")
    np.testing.assert_array_equal(ds.targets, np.eye(3)[[0, 2, 1]])
    with pytest.raises(ConfigError):
        load_idx(tmp_path / "x", as_autoencoder=False)


def test_dataset_validation():
    with pytest.raises(FormatError):
        Dataset(np.zeros((3, 2)), np.zeros((2, 2)))
    with pytest.raises(FormatError):
        Dataset([[np.nan]], [[0.0]])


def test_csv_loader(tmp_path):
    (tmp_path / "x.csv").write_text("0,0.5\n1,0.25\n")
    ds = load_csv(tmp_path / "x.csv")
    np.testing.assert_array_equal(ds.inputs, [[0, 0.5], [1, 0.25]])
    np.testing.assert_array_equal(ds.targets, ds.inputs)
    (tmp_path / "bad.csv").write_text("0,a\n")
    with pytest.raises(FormatError):
        load_csv(tmp_path / "bad.csv")


def test_synthetic_determinism_and_ranges():
    a = synthetic_autoencoder(3, 100, 12)
    b = synthetic_autoencoder(3, 100, 12)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    assert set(np.unique(a.inputs)) <= {0.0, 1.0}
    c = synthetic_autoencoder(3, 100, 12, kind="continuous")
    assert c.inputs.min() >= 0.0 and c.inputs.max() <= 1.0
    assert not np.array_equal(a.inputs, synthetic_autoencoder(4, 100, 12).inputs)
    with pytest.raises(ConfigError):
        synthetic_autoencoder(0, 10, 4, kind="nope")


def test_sampler_epoch_is_a_permutation_minus_tail():
    s = BatchSampler(10, 3, seed=5)
    assert s.batches_per_epoch == 3
    first = np.concatenate([s.next_indices() for _ in range(3)])
    assert len(set(first)) == 9 and set(first) <= set(range(10))
    np.testing.assert_array_equal(first, s.epoch_order(0)[:9])
    nxt = s.next_indices()
    assert s.epoch == 1
    np.testing.assert_array_equal(nxt, s.epoch_order(1)[:3])


def test_sampler_determinism_and_bounds():
    a, b = BatchSampler(50, 7, seed=1), BatchSampler(50, 7, seed=1)
    for _ in range(20):
        np.testing.assert_array_equal(a.next_indices(), b.next_indices())
    with pytest.raises(ConfigError):
        BatchSampler(5, 6)
    with pytest.raises(ConfigError):
        BatchSampler(5, 0)


def test_mnist_export(mnist_subset):
    images, labels = mnist_subset
    ds = load_idx(images)
    assert ds.inputs.shape == (5000, 784)
    assert 0.0 <= ds.inputs.min() and ds.inputs.max() <= 1.0
    lab = read_idx(labels)
    assert lab.shape == (5000,) and set(np.unique(lab)) == set(range(10))
