"""Dataset loaders (IDX, CIFAR binary, synthetic blobs) and seeded batching."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray   # [N, C, H, W] in [0, 1]
    labels: np.ndarray   # int64 [N]
    name: str = ""
    split: str = ""
    num_classes: int = 10

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise FormatError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise FormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.name, self.split, self.num_classes)


def _read(path) -> bytes:
    path = Path(path)
    data = path.read_bytes()
    return gzip.decompress(data) if data[:2] == b"\x1f\x8b" else data


def _idx_header(data: bytes, expected: int, path) -> tuple[int, ...]:
    if len(data) < 4:
        raise FormatError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected:
        raise FormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected:08x}")
    ndim = magic & 0xFF
    if len(data) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated IDX header")
    return struct.unpack(f">{ndim}I", data[4:4 + 4 * ndim])


def load_idx(images_path, labels_path, name: str = "mnist", split: str = "") -> Dataset:
    """Big-endian IDX image/label pair (gzip accepted); pixels scaled by 1/255."""
    img_raw, lab_raw = _read(images_path), _read(labels_path)
    dims = _idx_header(img_raw, IDX_IMAGES, images_path)
    (n_labels,) = _idx_header(lab_raw, IDX_LABELS, labels_path)
    n, h, w = dims
    need = 16 + n * h * w
    if len(img_raw) != need:
        raise FormatError(f"{images_path}: {len(img_raw)} bytes, header promises {need}")
    if len(lab_raw) != 8 + n_labels:
        raise FormatError(f"{labels_path}: {len(lab_raw)} bytes, header promises {8 + n_labels}")
    if n_labels != n:
        raise FormatError(f"{n} images but {n_labels} labels")
    pixels = np.frombuffer(img_raw, dtype=np.uint8, offset=16).reshape(n, 1, h, w)
    labels = np.frombuffer(lab_raw, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(pixels.astype(np.float64) / 255.0, labels, name, split,
                   max(10, int(labels.max()) + 1 if n else 10))


def load_cifar_bin(path, coarse: bool = False, split: str = "") -> Dataset:
    """CIFAR-10 (3073-byte records) or CIFAR-100 (3074, coarse label first)."""
    raw = _read(path)
    record = 3074 if coarse else 3073
    if len(raw) % record:
        raise FormatError(f"{path}: {len(raw)} bytes is not a multiple of the {record}-byte record")
    rows = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
    # CIFAR-100 records are (coarse, fine, pixels); we keep the fine label
    labels = rows[:, record - 3073].astype(np.int64)
    images = rows[:, record - 3072:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(images, labels, "cifar100" if coarse else "cifar10", split, 100 if coarse else 10)


def synthetic_blobs(n: int, classes: int = 2, dim: int = 16, seed: int = 0,
                    spread: float = 0.08, split: str = "") -> Dataset:
    """Gaussian clusters with unit-separated means, clipped into [0, 1].

    Class c is centred on 0.25 + e_c / sqrt(2) (e_c the c-th unit vector),
    so any two means are exactly 1 apart; shape is [n, 1, 1, dim].
    """
    if classes < 2:
        raise ValueError("synthetic_blobs needs at least two classes")
    if dim < classes:
        raise ValueError("synthetic_blobs needs dim >= classes")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, size=n)
    means = np.full((classes, dim), 0.25)
    means[np.arange(classes), np.arange(classes)] += np.sqrt(0.5)
    x = means[labels] + spread * rng.standard_normal((n, dim))
    return Dataset(np.clip(x, 0.0, 1.0).reshape(n, 1, 1, dim), labels.astype(np.int64),
                   "blobs", split, classes)


def find_mnist(root=None) -> tuple[Dataset, Dataset] | None:
    """Look for the four standard MNIST IDX files (optionally gzipped) in ``root``.

    ``root`` defaults to the ``MNIST_DIR`` environment variable.
    """
    root = root or os.environ.get("MNIST_DIR")
    if not root:
        return None
    root = Path(root)

    def pick(stem):
        for cand in (root / stem, root / (stem + ".gz")):
            if cand.exists():
                return cand
        return None

    files = [pick(s) for s in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")]
    if any(f is None for f in files):
        return None
    return (load_idx(files[0], files[1], "mnist", "train"),
            load_idx(files[2], files[3], "mnist", "test"))


class BatchIterator:
    """Seeded minibatches; each epoch draws a fresh permutation from one RNG stream."""

    def __init__(self, dataset: Dataset, batch_size: int, seed: int = 0, shuffle: bool = True):
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.dataset = dataset
        self.batch_size = batch_size
        self.shuffle = shuffle
        self.epoch = 0
        self._rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return -(-len(self.dataset) // self.batch_size)

    def permutation(self) -> np.ndarray:
        n = len(self.dataset)
        return self._rng.permutation(n) if self.shuffle else np.arange(n)

    def __iter__(self):
        order = self.permutation()
        self.epoch += 1
        for i in range(0, order.size, self.batch_size):
            idx = order[i:i + self.batch_size]
            yield self.dataset.images[idx], self.dataset.labels[idx]
