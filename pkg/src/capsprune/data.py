"""Dataset ingestion: IDX files, CIFAR-10 binary batches, synthetic shapes."""

from __future__ import annotations

import gzip
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import ArgumentError, BadMagicError, CountMismatchError, ParseError, TruncatedError

CIFAR_RECORD = 3073
CIFAR_SIDE = 32


@dataclass
class DatasetSplit:
    images: np.ndarray   # float32 [N, C, H, W] in [0, 1]
    labels: np.ndarray   # int64 [N]
    name: str = ""
    num_classes: Optional[int] = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ArgumentError(f"images must be [N,C,H,W], got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ArgumentError(f"{len(self.labels)} labels for {len(self.images)} images")
        if self.images.shape[2] != self.images.shape[3]:
            raise ArgumentError("images must be square")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ArgumentError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_size(self) -> int:
        return self.images.shape[2]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    def subset(self, idx, name: Optional[str] = None) -> "DatasetSplit":
        return DatasetSplit(self.images[idx], self.labels[idx], name or self.name, self.num_classes)


def holdout(split: DatasetSplit, n_test: int) -> tuple[DatasetSplit, DatasetSplit]:
    """Split off the last ``n_test`` items (e.g. a 50,000/10,000 MNIST split)."""
    if not 0 < n_test < len(split):
        raise ArgumentError(f"cannot hold out {n_test} of {len(split)} items")
    cut = len(split) - n_test
    return (split.subset(slice(0, cut), split.name + "-train"),
            split.subset(slice(cut, None), split.name + "-holdout"))


# ---------------------------------------------------------------- IDX


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(raw: bytes) -> np.ndarray:
    """Decode an unsigned-byte IDX payload into a uint8 array."""
    if len(raw) < 4:
        raise TruncatedError("IDX header shorter than 4 bytes")
    if raw[0] != 0 or raw[1] != 0 or raw[2] != 0x08:
        raise BadMagicError(f"bad IDX magic {raw[:4].hex()}")
    rank = raw[3]
    if rank == 0:
        raise BadMagicError("IDX rank must be positive")
    header = 4 + 4 * rank
    if len(raw) < header:
        raise TruncatedError("IDX dimension header truncated")
    dims = struct.unpack(f">{rank}I", raw[4:header])
    count = int(np.prod(dims))
    payload = len(raw) - header
    if payload < count:
        raise TruncatedError(f"IDX payload has {payload} bytes, header declares {count}")
    if payload > count:
        raise ParseError(f"IDX payload has {payload - count} trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ArgumentError("write_idx stores unsigned bytes only")
    Path(path).write_bytes(idx_bytes(arr))


def idx_bytes(arr: np.ndarray) -> bytes:
    header = bytes([0, 0, 0x08, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def load_idx(image_path, label_path, name: str = "idx", num_classes: Optional[int] = None) -> DatasetSplit:
    """Load an IDX image file (rank 3, or rank 4 channels-last) and its label file."""
    images = parse_idx(_read_bytes(image_path))
    labels = parse_idx(_read_bytes(label_path))
    if images.ndim == 3:
        images = images[:, None, :, :]
    elif images.ndim == 4:
        images = images.transpose(0, 3, 1, 2)
    else:
        raise BadMagicError(f"image file must have rank 3 or 4, got {images.ndim}")
    if labels.ndim != 1:
        raise BadMagicError(f"label file must have rank 1, got {labels.ndim}")
    if len(labels) != len(images):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    return DatasetSplit(images.astype(np.float32) / 255.0, labels.astype(np.int64), name, num_classes)


# ---------------------------------------------------------------- CIFAR-10


def load_cifar10(bin_paths: Iterable, name: str = "cifar10") -> DatasetSplit:
    """Concatenate CIFAR-10 binary batches of 3073-byte records."""
    images, labels = [], []
    for path in [bin_paths] if isinstance(bin_paths, (str, Path)) else bin_paths:
        raw = _read_bytes(path)
        if len(raw) % CIFAR_RECORD:
            raise ParseError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        if not raw:
            warnings.warn(f"{path}: empty CIFAR-10 batch", stacklevel=2)
            continue
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE))
    if not images:
        return DatasetSplit(np.zeros((0, 3, CIFAR_SIDE, CIFAR_SIDE), np.float32), np.zeros(0, np.int64), name, 10)
    return DatasetSplit(np.concatenate(images).astype(np.float32) / 255.0, np.concatenate(labels), name, 10)


def load_cifar10_dir(directory) -> tuple[DatasetSplit, DatasetSplit]:
    d = Path(directory)
    train = load_cifar10([d / f"data_batch_{i}.bin" for i in range(1, 6)], "cifar10-train")
    test = load_cifar10([d / "test_batch.bin"], "cifar10-test")
    return train, test


# ---------------------------------------------------------------- synthetic


def _hbar(img, cy, cx, size, th):
    img[cy - th // 2:cy - th // 2 + th, cx - size // 2:cx - size // 2 + size] = 1


def _vbar(img, cy, cx, size, th):
    img[cy - size // 2:cy - size // 2 + size, cx - th // 2:cx - th // 2 + th] = 1


def _cross(img, cy, cx, size, th):
    _hbar(img, cy, cx, size, th)
    _vbar(img, cy, cx, size, th)


def _box(img, cy, cx, size, th):
    y0, x0 = cy - size // 2, cx - size // 2
    img[y0:y0 + size, x0:x0 + size] = 1
    img[y0 + th:y0 + size - th, x0 + th:x0 + size - th] = 0


def _diag(img, cy, cx, size, th, flip=False):
    for k in range(size):
        y = cy - size // 2 + k
        x = cx - size // 2 + (size - 1 - k if flip else k)
        img[y, x:x + th] = 1


def _anti(img, cy, cx, size, th):
    _diag(img, cy, cx, size, th, flip=True)


def _ex(img, cy, cx, size, th):
    _diag(img, cy, cx, size, th)
    _anti(img, cy, cx, size, th)


def _ell(img, cy, cx, size, th):
    y0, x0 = cy - size // 2, cx - size // 2
    img[y0:y0 + size, x0:x0 + th] = 1
    img[y0 + size - th:y0 + size, x0:x0 + size] = 1


SHAPES = (_hbar, _vbar, _cross, _box, _diag, _anti, _ex, _ell)
SHAPE_NAMES = ("hbar", "vbar", "cross", "box", "diag", "anti", "ex", "ell")


def synth_dataset(
    n: int,
    image_size: int = 28,
    classes: int = 2,
    seed: int = 0,
    *,
    jitter: Optional[int] = None,
    noise: float = 0.15,
) -> DatasetSplit:
    """Rendered line shapes at jittered positions and sizes with additive noise.

    Labels cycle through the classes so every class is present once ``n >= classes``.
    """
    if image_size < 19:
        raise ArgumentError(f"image_size must be >= 19, got {image_size}")
    if not 1 <= classes <= len(SHAPES):
        raise ArgumentError(f"classes must be in [1, {len(SHAPES)}], got {classes}")
    rng = np.random.Generator(np.random.Philox(seed))
    jitter = image_size // 5 if jitter is None else jitter
    labels = rng.permutation(np.arange(n) % classes)
    images = np.zeros((n, 1, image_size, image_size), dtype=np.float32)
    lo_size, hi_size = max(5, image_size // 3), max(6, image_size // 2)
    for i, lab in enumerate(labels):
        img = np.zeros((image_size, image_size), dtype=np.float32)
        size = int(rng.integers(lo_size, hi_size + 1))
        th = int(rng.integers(1, 3))
        half = size // 2 + 1
        c_lo = max(half, image_size // 2 - jitter)
        c_hi = min(image_size - half - th, image_size // 2 + jitter)
        cy, cx = (int(v) for v in rng.integers(c_lo, c_hi + 1, size=2))
        SHAPES[lab](img, cy, cx, size, th)
        img *= rng.uniform(0.6, 1.0)
        img += noise * rng.random((image_size, image_size), dtype=np.float32)
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return DatasetSplit(images, labels, f"synth{classes}", classes)
