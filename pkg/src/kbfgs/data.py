"""Datasets, file readers and deterministic minibatch sampling."""

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .mlp import DataBatch

# IDX type codes -> big-endian numpy dtypes
_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=np.float64))
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise FormatError("inputs and targets have different sample counts")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise FormatError("dataset contains non-finite values")

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, index, name=None):
        return Dataset(self.inputs[index], self.targets[index], name or self.name)

    def as_batch(self):
        return DataBatch(self.inputs, self.targets)


def _read_bytes(path):
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        return fh.read()


def read_idx(path):
    """Read an IDX file into an array of its stored shape."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header")
    zero, type_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or type_code not in _IDX_TYPES or ndim == 0:
        raise FormatError(f"{path}: bad IDX magic number")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX dimension header")
    shape = struct.unpack(">" + "I" * ndim, raw[4:header])
    dtype = _IDX_TYPES[type_code]
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) - header != expected:
        raise FormatError(f"{path}: payload is {len(raw) - header} bytes, expected {expected}")
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(shape)


def write_idx(path, array):
    """Write an unsigned-byte (or float64) array as an IDX file."""
    array = np.asarray(array)
    if array.dtype == np.uint8:
        code, dtype = 0x08, np.dtype(">u1")
    else:
        code, dtype = 0x0E, np.dtype(">f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, code, array.ndim))
        fh.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        fh.write(array.astype(dtype).tobytes())


def load_idx(images_path, as_autoencoder=True, labels_path=None, name=None):
    """Load IDX images as flattened vectors scaled by 1/255.

    Targets equal the inputs for autoencoders; otherwise they are one-hot
    encodings of the labels in ``labels_path``.
    """
    images = read_idx(images_path)
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    name = name or Path(images_path).name
    if as_autoencoder:
        return Dataset(x, x.copy(), name)
    if labels_path is None:
        raise ConfigError("labels_path is required when as_autoencoder is false")
    labels = read_idx(labels_path).astype(np.int64).reshape(-1)
    if labels.shape[0] != x.shape[0]:
        raise FormatError("label count does not match image count")
    targets = np.zeros((labels.shape[0], labels.max() + 1))
    targets[np.arange(labels.shape[0]), labels] = 1.0
    return Dataset(x, targets, name)


def load_csv(inputs_path, targets_path=None, name=None):
    """One sample per row, comma-separated floats, no header."""
    try:
        x = np.loadtxt(inputs_path, delimiter=",", ndmin=2, dtype=np.float64)
        y = x.copy() if targets_path is None else np.loadtxt(
            targets_path, delimiter=",", ndmin=2, dtype=np.float64)
    except ValueError as exc:
        raise FormatError(str(exc)) from None
    return Dataset(x, y, name or Path(inputs_path).name)


def synthetic_autoencoder(seed, n, dim, kind="binary", rank=8):
    """Low-rank autoencoder data standing in for FACES/CURVES at desk scale."""
    if n < 1 or dim < 1:
        raise ConfigError("n and dim must be >= 1")
    rng = np.random.default_rng(seed)
    latent = rng.standard_normal((n, rank))
    mixing = rng.standard_normal((rank, dim)) / np.sqrt(rank)
    z = latent @ mixing
    if kind == "binary":
        probs = 1.0 / (1.0 + np.exp(-3.0 * z))
        x = (rng.random((n, dim)) < probs).astype(np.float64)
    elif kind == "continuous":
        lo, hi = z.min(), z.max()
        x = (z - lo) / (hi - lo) if hi > lo else np.zeros_like(z)
    else:
        raise ConfigError(f"unknown synthetic kind {kind!r}")
    return Dataset(x, x.copy(), f"synthetic-{kind}")


class BatchSampler:
    """Per-epoch shuffled minibatches; the trailing partial batch is dropped."""

    def __init__(self, n, batch_size, seed=0):
        if batch_size < 1 or batch_size > n:
            raise ConfigError(f"batch size {batch_size} is not in [1, {n}]")
        self.n = n
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = 0
        self._pos = 0
        self._order = self.epoch_order(0)

    @property
    def batches_per_epoch(self):
        return self.n // self.batch_size

    def epoch_order(self, epoch):
        return np.random.default_rng([self.seed, epoch]).permutation(self.n)

    def next_indices(self):
        if self._pos >= self.batches_per_epoch:
            self.epoch += 1
            self._pos = 0
            self._order = self.epoch_order(self.epoch)
        lo = self._pos * self.batch_size
        self._pos += 1
        return self._order[lo:lo + self.batch_size]

    def next_batch(self, dataset):
        idx = self.next_indices()
        return DataBatch(dataset.inputs[idx], dataset.targets[idx])


def next_batch(sampler, dataset):
    return sampler.next_batch(dataset)


def export_mnist_subset(out_dir):
    """Write the 5,000-image MNIST sample bundled with ``mlxtend`` as IDX files.

    Returns ``(images_path, labels_path)``.  Requires the optional
    ``mlxtend`` package.
    """
    import importlib.resources

    src = importlib.resources.files("mlxtend.data") / "data" / "mnist_5k.csv.gz"
    with src.open("rb") as raw, gzip.open(raw, "rt") as fh:
        table = np.loadtxt(fh, delimiter=",", dtype=np.float64)
    pixels = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, -1].astype(np.uint8)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images_path = out / "mnist5k-images-idx3-ubyte"
    labels_path = out / "mnist5k-labels-idx1-ubyte"
    write_idx(images_path, pixels)
    write_idx(labels_path, labels)
    return images_path, labels_path
