"""Labeled image datasets and IDX (MNIST format) file I/O."""

import gzip
import hashlib
import importlib.util
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import ConfigError, LoadError

_IDX_UBYTE = 0x08


@dataclass
class LabeledDataset:
    images: np.ndarray  # float32 [N, C, H, W] in [0, 1]
    labels: np.ndarray  # int64 [N]
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N, C, H, W], got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and self.labels.min() < 0:
            raise ValueError("labels must be non-negative")

    def __len__(self):
        return len(self.labels)

    def subset(self, n, seed):
        """A seeded random subset of at most ``n`` items, kept in original order."""
        if n is None or n >= len(self):
            return self
        idx = np.sort(rng.generator(seed, 0x5B5E).choice(len(self), size=n, replace=False))
        return LabeledDataset(self.images[idx], self.labels[idx], dict(self.source, subset=int(n), subset_seed=seed))


def read_idx(path):
    opener = gzip.open if os.fspath(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise LoadError(f"{path}: not an IDX file")
    if raw[2] != _IDX_UBYTE:
        raise LoadError(f"{path}: only unsigned-byte IDX files are supported")
    ndim = raw[3]
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    body = raw[4 + 4 * ndim:]
    if len(body) != int(np.prod(dims)):
        raise LoadError(f"{path}: expected {int(np.prod(dims))} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def write_idx(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = bytes([0, 0, _IDX_UBYTE, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    with open(path, "wb") as fh:
        fh.write(header + array.tobytes())


def load_idx_dataset(images_path, labels_path):
    for p in (images_path, labels_path):
        if not os.path.exists(p):
            raise ConfigError(f"dataset file not found: {p}")
    raw = read_idx(images_path)
    labels = read_idx(labels_path).astype(np.int64)
    if raw.ndim == 3:
        raw = raw[:, None]
    if raw.ndim != 4:
        raise LoadError(f"{images_path}: expected [N, H, W] or [N, C, H, W] images, got {raw.shape}")
    digest = hashlib.sha256()
    for p in (images_path, labels_path):
        with open(p, "rb") as fh:
            digest.update(fh.read())
    source = {"images": os.fspath(images_path), "labels": os.fspath(labels_path), "sha256": digest.hexdigest()[:16]}
    try:
        return LabeledDataset(raw.astype(np.float32) / np.float32(255.0), labels, source)
    except ValueError as exc:
        raise LoadError(str(exc)) from None


def mnist5k_path():
    """Location of the 5000-digit MNIST sample bundled with ``mlxtend``, or None."""
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or not spec.submodule_search_locations:
        return None
    path = os.path.join(spec.submodule_search_locations[0], "data", "data", "mnist_5k.csv.gz")
    return path if os.path.exists(path) else None


def export_mnist5k(outdir, test_per_class=100, seed=0):
    """Write a stratified train/test split of the bundled MNIST sample as IDX files.

    Returns a dict with the four written paths. The split is a pure function
    of ``seed``.
    """
    src = mnist5k_path()
    if src is None:
        raise ConfigError("the MNIST sample requires the optional 'mlxtend' package (pip install mlxtend)")
    table = np.loadtxt(gzip.open(src), delimiter=",", dtype=np.uint8)
    pixels, labels = table[:, :-1].reshape(-1, 28, 28), table[:, -1]
    gen = rng.generator(seed, 0xD16)
    train_idx, test_idx = [], []
    for c in np.unique(labels):
        idx = gen.permutation(np.flatnonzero(labels == c))
        test_idx.append(idx[:test_per_class])
        train_idx.append(idx[test_per_class:])
    train_idx = gen.permutation(np.concatenate(train_idx))
    test_idx = gen.permutation(np.concatenate(test_idx))
    os.makedirs(outdir, exist_ok=True)
    paths = {
        "train_images": os.path.join(outdir, "train-images-idx3-ubyte"),
        "train_labels": os.path.join(outdir, "train-labels-idx1-ubyte"),
        "test_images": os.path.join(outdir, "t10k-images-idx3-ubyte"),
        "test_labels": os.path.join(outdir, "t10k-labels-idx1-ubyte"),
    }
    write_idx(paths["train_images"], pixels[train_idx])
    write_idx(paths["train_labels"], labels[train_idx])
    write_idx(paths["test_images"], pixels[test_idx])
    write_idx(paths["test_labels"], labels[test_idx])
    return paths
