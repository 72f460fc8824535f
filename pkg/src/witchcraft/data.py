"""MNIST IDX parsing, unit-range normalisation and synthetic blob datasets."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "IMAGE_MAGIC",
    "LABEL_MAGIC",
    "IdxError",
    "BadMagicError",
    "TruncatedError",
    "LabeledDataset",
    "load_idx_images",
    "load_idx_labels",
    "write_idx_images",
    "write_idx_labels",
    "normalize",
    "denormalize",
    "synthetic_blobs",
    "load_mnist",
    "MNIST_FILES",
]

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxError(ValueError):
    """Base class for malformed IDX files."""


class BadMagicError(IdxError):
    pass


class TruncatedError(IdxError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    """Images with integer labels.

    ``images`` has shape (count, *example_shape): (count, H, W, C) for image
    data, (count, dims) for synthetic vectors. Pixels lie in [0, 1].
    """

    images: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        images = np.asarray(self.images)
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or len(images) != len(labels):
            raise ValueError(f"{len(images)} images but {labels.size} labels")
        if labels.size and (labels.dtype.kind not in "iu" or labels.min() < 0 or labels.max() >= self.class_count):
            raise ValueError(f"labels must be integers in [0, {self.class_count})")
        if images.size and (images.min() < 0 or images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        images.flags.writeable = False
        labels = labels.astype(np.int64)
        labels.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.class_count)

    def head(self, n: int) -> "LabeledDataset":
        return self.subset(np.arange(min(n, len(self))))


def _read(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse(raw: bytes, magic: int, ndims: int, path) -> np.ndarray:
    header = 4 + 4 * ndims
    if len(raw) < 4:
        raise TruncatedError(f"{path}: file too short for an IDX header ({len(raw)} bytes)")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(raw) < header:
        raise TruncatedError(f"{path}: header needs {header} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndims}I", raw[4:header])
    expected = header + int(np.prod(dims, dtype=np.int64))
    if len(raw) < expected:
        raise TruncatedError(f"{path}: expected {expected} bytes, got {len(raw)}")
    if len(raw) > expected:
        raise IdxError(f"{path}: {len(raw) - expected} unexpected trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx_images(path) -> np.ndarray:
    """(count, rows, cols) uint8 array from an IDX3 image file (optionally gzipped)."""
    return _parse(_read(path), IMAGE_MAGIC, 3, path)


def load_idx_labels(path) -> np.ndarray:
    return _parse(_read(path), LABEL_MAGIC, 1, path)


def write_idx_images(path, images) -> None:
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError("images must be (count, rows, cols)")
    Path(path).write_bytes(struct.pack(">4I", IMAGE_MAGIC, *images.shape) + images.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">2I", LABEL_MAGIC, len(labels)) + labels.tobytes())


def normalize(raw, dtype=np.float32) -> np.ndarray:
    """Bytes to [0, 1]: ``v / 255``, correctly rounded in ``dtype``."""
    return (np.asarray(raw, dtype=np.float64) / 255.0).astype(dtype)


def denormalize(values) -> np.ndarray:
    return np.rint(np.asarray(values, dtype=np.float64) * 255.0).astype(np.uint8)


def synthetic_blobs(classes: int, dims: int, count: int, seed: int = 0, spread: float = 0.05) -> LabeledDataset:
    """Gaussian clusters, one per class, clipped to [0, 1].

    Class means sit on a ring (dims >= 2) of radius 0.3 around 0.5, so they are
    at least ``0.6 * sin(pi / classes)`` apart while staying inside the unit box.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if dims < 1 or count < 1:
        raise ValueError("dims and count must be positive")
    rng = np.random.default_rng(seed)
    means = np.full((classes, dims), 0.5)
    angles = 2 * np.pi * np.arange(classes) / classes
    means[:, 0] += 0.3 * np.cos(angles)
    if dims > 1:
        means[:, 1] += 0.3 * np.sin(angles)
    labels = np.arange(count) % classes
    points = means[labels] + spread * rng.standard_normal((count, dims))
    return LabeledDataset(np.clip(points, 0.0, 1.0).astype(np.float32), labels, classes)


def load_mnist(directory, split: str = "train", limit: int | None = None) -> LabeledDataset:
    """MNIST split as (count, 28, 28, 1) float32 images in [0, 1].

    Looks for the standard file names, with or without a ``.gz`` suffix.
    ``limit`` keeps the first ``limit`` examples.
    """
    directory = Path(directory)
    paths = []
    for name in MNIST_FILES[split]:
        for candidate in (directory / name, directory / f"{name}.gz"):
            if candidate.exists():
                paths.append(candidate)
                break
        else:
            raise FileNotFoundError(f"{name}[.gz] not found in {directory}")
    images = load_idx_images(paths[0])
    labels = load_idx_labels(paths[1])
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return LabeledDataset(normalize(images)[..., None], labels, 10)
