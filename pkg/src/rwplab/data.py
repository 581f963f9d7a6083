"""Datasets: seeded synthetic 2-D generators and an MNIST IDX subset loader."""
from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.datasets import make_blobs, make_moons

from .errors import BadMagicError, ContractError, RecordCountError, TruncatedFileError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    name: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    class_count: int
    input_box: tuple[float, float] | None = None
    # optional pseudo-labeled pool for robust self-training
    x_pseudo: np.ndarray | None = None
    y_pseudo: np.ndarray | None = None

    def __post_init__(self):
        for x, y in ((self.x_train, self.y_train), (self.x_test, self.y_test)):
            if x.ndim != 2 or len(x) != len(y):
                raise ContractError("features must be [n, d] with one label per row")
            if len(y) and (y.min() < 0 or y.max() >= self.class_count):
                raise ContractError("labels out of range")
        if self.x_train.shape[1] != self.x_test.shape[1]:
            raise ContractError("train/test feature dimensions differ")

    @property
    def in_dim(self) -> int:
        return self.x_train.shape[1]


def _split(x, y, test_fraction, rng):
    order = rng.permutation(len(y))
    n_test = int(round(len(y) * test_fraction))
    test, train = order[:n_test], order[n_test:]
    return x[train], y[train], x[test], y[test]


def gen_synthetic(
    kind: str,
    n: int,
    noise: float,
    seed: int,
    class_count: int = 2,
    test_fraction: float = 0.5,
    spread: float = 3.0,
) -> Dataset:
    """Seeded 2-D classification data split into disjoint train/test halves.

    ``gaussians`` places ``class_count`` means on a circle of radius
    ``spread`` with isotropic noise of standard deviation ``noise``;
    ``moons`` is the classic two interleaving half circles.
    """
    if noise < 0:
        raise ContractError("noise must be >= 0")
    if kind == "moons":
        class_count = 2
    if n < 2 * class_count:
        raise ContractError(f"need n >= {2 * class_count}")
    rng = np.random.default_rng(seed)
    if kind == "gaussians":
        angles = 2 * np.pi * np.arange(class_count) / class_count
        centers = spread * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        x, y = make_blobs(
            n_samples=n, centers=centers, cluster_std=noise, random_state=int(rng.integers(2**31))
        )
    elif kind == "moons":
        x, y = make_moons(n_samples=n, noise=noise, random_state=int(rng.integers(2**31)))
    else:
        raise ContractError(f"unknown synthetic kind {kind!r}")
    x = x.astype(np.float64)
    y = y.astype(np.int64)
    return Dataset(f"{kind}-{n}", *_split(x, y, test_fraction, rng), class_count=class_count)


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise TruncatedFileError(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Parse an IDX file (optionally gzip-compressed) into a uint8 array."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: file shorter than the IDX magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = math.prod(dims)
    body = raw[header:]
    if len(body) < count:
        raise TruncatedFileError(f"{path}: expected {count} bytes of data, found {len(body)}")
    if len(body) > count:
        raise TruncatedFileError(f"{path}: {len(body) - count} trailing bytes after IDX data")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def _subset(images, labels, count, seed, path):
    if count <= 0:
        raise ContractError("count must be positive; an empty dataset is not allowed")
    if count > len(labels):
        raise RecordCountError(f"{path}: requested {count} records, file holds {len(labels)}")
    if seed is None:
        idx = np.arange(count)
    else:
        idx = np.sort(np.random.default_rng(seed).choice(len(labels), size=count, replace=False))
    x = images[idx].reshape(count, -1).astype(np.float64) / 255.0
    return x, labels[idx].astype(np.int64)


def load_idx_pair(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if len(images) != len(labels):
        raise RecordCountError(
            f"{images_path}: {len(images)} images but {labels_path} has {len(labels)} labels"
        )
    return images, labels


def load_idx_subset(
    images_path,
    labels_path,
    count: int,
    seed: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """First ``count`` records (or a seeded random subset) scaled to [0, 1]."""
    images, labels = load_idx_pair(images_path, labels_path)
    return _subset(images, labels, count, seed, images_path)


def load_mnist(
    root,
    train_count: int = 1000,
    test_count: int = 1000,
    seed: int | None = None,
) -> Dataset:
    """MNIST subset from ``root`` holding the standard four IDX files (gzipped or not)."""
    root = Path(root)

    def find(stem):
        for candidate in (root / f"{stem}.gz", root / stem):
            if candidate.exists():
                return candidate
        raise FileNotFoundError(f"{root}: missing {stem}[.gz]")

    x_tr, y_tr = load_idx_subset(
        find("mnist-train-images-idx3-ubyte"), find("mnist-train-labels-idx1-ubyte"), train_count, seed
    )
    x_te, y_te = load_idx_subset(
        find("mnist-t10k-images-idx3-ubyte"), find("mnist-t10k-labels-idx1-ubyte"), test_count, seed
    )
    return Dataset(f"mnist-{train_count}", x_tr, y_tr, x_te, y_te, class_count=10, input_box=(0.0, 1.0))


def write_idx(path, array: np.ndarray, compress: bool | None = None) -> None:
    """Write a uint8 array as IDX; gzip when the path ends in ``.gz``."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    blob = struct.pack(">I", magic) + struct.pack(">" + "I" * array.ndim, *array.shape) + array.tobytes()
    path = Path(path)
    if compress is None:
        compress = path.suffix == ".gz"
    path.write_bytes(gzip.compress(blob, mtime=0) if compress else blob)


def attach_pseudo_labels(dataset: Dataset, model, x_unlabeled: np.ndarray) -> Dataset:
    """Label ``x_unlabeled`` with ``model``'s predictions for robust self-training."""
    y = model.predict(np.asarray(x_unlabeled, dtype=np.float64))
    return Dataset(
        dataset.name,
        dataset.x_train,
        dataset.y_train,
        dataset.x_test,
        dataset.y_test,
        dataset.class_count,
        dataset.input_box,
        np.asarray(x_unlabeled, dtype=np.float64),
        y.astype(np.int64),
    )
