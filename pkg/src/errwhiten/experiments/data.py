"""MNIST IDX files and the regression target."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import FormatError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class MnistDataset:
    images: np.ndarray  # (n, 784) in [0, 1]
    labels: np.ndarray  # (n,) ints in 0..9

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise FormatError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def one_hot(self, k: int = 10) -> np.ndarray:
        return np.eye(k)[self.labels]

    def subset(self, idx) -> "MnistDataset":
        return MnistDataset(self.images[idx], self.labels[idx])


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _parse(raw: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise FormatError(f"{what} file is truncated in its header")
    (found,) = struct.unpack(">i", raw[:4])
    if found != magic:
        raise FormatError(f"{what} file has magic {found:#010x}, expected {magic:#010x}")
    dims = struct.unpack(f">{ndim}i", raw[4:head])
    need = int(np.prod(dims))
    body = raw[head:]
    if len(body) != need:
        raise FormatError(f"{what} file holds {len(body)} data bytes, header declares {need}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_mnist_idx(images_path, labels_path) -> MnistDataset:
    """Read an image/label IDX pair (optionally gzipped); pixels scaled by 1/255."""
    images = _parse(_read_bytes(images_path), IMAGE_MAGIC, 3, "image")
    labels = _parse(_read_bytes(labels_path), LABEL_MAGIC, 1, "label")
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return MnistDataset(flat, labels.astype(np.int64))


def write_idx_images(path, images: np.ndarray) -> None:
    """images: (n, rows, cols) uint8."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(path).write_bytes(struct.pack(">4i", IMAGE_MAGIC, n, rows, cols) + images.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">2i", LABEL_MAGIC, labels.size) + labels.tobytes())


def regression_target(X: np.ndarray) -> np.ndarray:
    x, y = X[:, 0], X[:, 1]
    return np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y) + np.sin(7 * np.pi * x) * np.sin(7 * np.pi * y)


def unit_square_grid(n: int) -> np.ndarray:
    g = np.linspace(0.0, 1.0, n)
    X, Y = np.meshgrid(g, g, indexing="ij")
    return np.stack([X.ravel(), Y.ravel()], axis=-1)
