"""
IDX files and synthetic data
============================

MNIST ships in the IDX container: a big-endian magic number, the
dimensions, then raw bytes. This script writes a tiny file, reads it back,
normalises it to [0, 1], and shows what a corrupted file does.
"""

import struct
import tempfile
from pathlib import Path

import numpy as np

from witchcraft.data import (
    BadMagicError,
    TruncatedError,
    load_idx_images,
    normalize,
    synthetic_blobs,
    write_idx_images,
)

tmp = Path(tempfile.mkdtemp())
pixels = np.array([[[0, 128], [255, 7]]], dtype=np.uint8)
write_idx_images(tmp / "img", pixels)
print("raw bytes:", (tmp / "img").read_bytes().hex(" "))
print("parsed:", load_idx_images(tmp / "img").tolist())
print("normalised:", normalize(load_idx_images(tmp / "img")).tolist())

# Corruption is reported, never papered over.
(tmp / "bad").write_bytes(struct.pack(">I", 0x801) + b"\0" * 12)
try:
    load_idx_images(tmp / "bad")
except BadMagicError as exc:
    print("bad magic:", exc)
(tmp / "short").write_bytes((tmp / "img").read_bytes()[:-1])
try:
    load_idx_images(tmp / "short")
except TruncatedError as exc:
    print("truncated:", exc)

# Gaussian blobs stand in for real data in quick experiments.
blobs = synthetic_blobs(classes=3, dims=2, count=9, seed=0)
print(blobs.images.round(3))
print(blobs.labels)
