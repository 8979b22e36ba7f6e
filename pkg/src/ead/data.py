"""Datasets as flattened pixel vectors in [0,1] plus integer labels.

Two sources: the IDX file pair format (big-endian headers, raw uint8
pixels scaled by 1/255) and the bundled 8x8 handwritten digits corpus
used for desk-scale experiments.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """IDX file is malformed: bad magic, truncated, or mismatched counts."""


@dataclass
class Example:
    """One image as the attack sees it: pixels in [0,1]^p and the true label."""

    x: np.ndarray
    label: int


@dataclass
class Dataset:
    x: np.ndarray  # (N, p) float64 in [0, 1]
    y: np.ndarray  # (N,) int64
    input_shape: tuple
    num_classes: int
    split: str

    def __post_init__(self):
        if self.x.ndim != 2 or self.x.shape[0] != self.y.shape[0]:
            raise ValueError("images and labels disagree on the example count")

    def __len__(self):
        return self.x.shape[0]

    def examples(self) -> list[Example]:
        return [Example(self.x[i], int(self.y[i])) for i in range(len(self))]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices)
        return Dataset(
            self.x[indices], self.y[indices], self.input_shape, self.num_classes, self.split
        )


def _read_exact(f, n, path):
    buf = f.read(n)
    if len(buf) != n:
        raise IdxFormatError(f"{path}: truncated, wanted {n} more bytes")
    return buf


def load_idx(images_path, labels_path, split: str = "test") -> Dataset:
    """Parse an IDX image/label file pair into a Dataset.

    Headers are big-endian u32: images carry magic 0x00000803 then
    (count, rows, cols); labels carry magic 0x00000801 then count. Pixel
    bytes are scaled by 1/255 into [0,1].
    """
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, images_path))
        if magic != IMAGE_MAGIC:
            raise IdxFormatError(
                f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}"
            )
        raw = _read_exact(f, count * rows * cols, images_path)
    with open(labels_path, "rb") as f:
        magic, label_count = struct.unpack(">II", _read_exact(f, 8, labels_path))
        if magic != LABEL_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}"
            )
        labels = np.frombuffer(_read_exact(f, label_count, labels_path), dtype=np.uint8)
    if count != label_count:
        raise IdxFormatError(
            f"image count {count} does not match label count {label_count}"
        )
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)
    return Dataset(
        x=pixels.astype(np.float64) / 255.0,
        y=labels.astype(np.int64),
        input_shape=(rows, cols, 1),
        num_classes=int(labels.max()) + 1 if label_count else 0,
        split=split,
    )


def write_idx(images_path, labels_path, images, labels) -> None:
    """Inverse of load_idx for uint8 images shaped (N, rows, cols)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, n))
        f.write(labels.tobytes())


def load_digits_dataset(split: str = "train", test_fraction: float = 0.2, seed: int = 0) -> Dataset:
    """The bundled 8x8 handwritten digits corpus, stratified train/test split.

    Pixel values arrive in [0, 16] and are scaled to [0, 1]. The split is
    deterministic for a given seed, so every run sees the same partition.
    """
    from sklearn.datasets import load_digits
    from sklearn.model_selection import train_test_split

    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    raw = load_digits()
    x = raw.images.reshape(len(raw.images), -1) / 16.0
    y = raw.target.astype(np.int64)
    x_train, x_test, y_train, y_test = train_test_split(
        x, y, test_size=test_fraction, random_state=seed, stratify=y
    )
    xs, ys = (x_train, y_train) if split == "train" else (x_test, y_test)
    return Dataset(
        x=np.ascontiguousarray(xs, dtype=np.float64),
        y=np.ascontiguousarray(ys),
        input_shape=(8, 8, 1),
        num_classes=10,
        split=split,
    )
