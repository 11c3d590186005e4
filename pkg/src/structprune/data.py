"""Dataset ingestion: MNIST-style IDX files, CIFAR-10 binary batches, and
synthetic class-blob images for download-free runs."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073


@dataclass
class DatasetHandle:
    images: np.ndarray  # N x C x H x W, float64 in [0, 1]
    labels: np.ndarray  # N, int64
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) == 0:
            raise ConfigError("dataset is empty")
        if len(self.images) != len(self.labels):
            raise ConfigError("image and label counts differ")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ConfigError(f"labels fall outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, index, split=None):
        index = np.asarray(index)
        return DatasetHandle(self.images[index], self.labels[index], split or self.split, self.num_classes)

    def head(self, n):
        return self if n >= len(self) else self.subset(np.arange(n))

    def split_off(self, fraction, seed, name="test"):
        """Random ``(rest, held_out)`` split with ``fraction`` of records held out."""
        order = np.random.default_rng(seed).permutation(len(self))
        cut = len(self) - int(round(fraction * len(self)))
        return self.subset(np.sort(order[:cut])), self.subset(np.sort(order[cut:]), split=name)


def _read_bytes(path):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def read_idx(path, expected_magic):
    """Parse an IDX file of unsigned bytes into an ndarray of uint8."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header", offset=len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension header", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = header + int(np.prod(dims))
    if len(raw) < need:
        raise FormatError(f"{path}: truncated payload, expected {need} bytes, got {len(raw)}", offset=len(raw))
    if len(raw) > need:
        raise FormatError(f"{path}: {len(raw) - need} trailing bytes after payload", offset=need)
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def _idx_labels_path(images_path):
    p = Path(images_path)
    name = p.name.replace("images-idx3", "labels-idx1").replace("images", "labels")
    return p.with_name(name)


def load_dataset(path, format, labels_path=None, split="train", num_classes=10):
    """Load an on-disk dataset.

    ``format`` is ``"idx"`` (``path`` is the images file; labels default to the
    sibling file with ``images`` replaced by ``labels`` in its name) or
    ``"cifar10"`` (``path`` is one binary batch). Pixels are scaled to [0, 1].
    """
    if format == "idx":
        images = read_idx(path, IDX_IMAGES_MAGIC)
        labels = read_idx(labels_path or _idx_labels_path(path), IDX_LABELS_MAGIC)
        if len(labels) != len(images):
            raise FormatError(f"{len(images)} images but {len(labels)} labels", offset=8)
        x = images[:, None, :, :].astype(np.float64) / 255.0
        y = labels.astype(np.int64)
    elif format == "cifar10":
        raw = _read_bytes(path)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            whole = len(raw) // CIFAR_RECORD * CIFAR_RECORD
            raise FormatError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}", offset=whole)
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        y = rec[:, 0].astype(np.int64)
        bad = np.flatnonzero(y >= num_classes)
        if bad.size:
            raise FormatError(f"{path}: label {y[bad[0]]} out of range", offset=int(bad[0]) * CIFAR_RECORD)
        x = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    else:
        raise ConfigError(f"unknown dataset format {format!r}")
    return DatasetHandle(x, y, split, num_classes)


def write_idx(path, array):
    """Write uint8 data as an IDX file (images if 3-D, labels if 1-D)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(f">I{array.ndim}I", magic, *array.shape))
        fh.write(array.tobytes())


def synth_dataset(seed, n, classes, image_shape=(1, 16, 16), noise=0.12, split="train"):
    """Gaussian class-blob images.

    Each class owns a smooth prototype built from a few Gaussian bumps; a
    sample is its prototype plus i.i.d. pixel noise, clipped to [0, 1].
    Labels are drawn uniformly, so class counts are multinomial.
    """
    if n < classes:
        raise ConfigError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    c, h, w = image_shape
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    protos = np.zeros((classes, c, h, w))
    for k in range(classes):
        for ch in range(c):
            for _ in range(3):
                cy, cx = rng.uniform(0.15, 0.85, size=2)
                s = rng.uniform(0.08, 0.18)
                protos[k, ch] += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    protos = 0.8 * protos / protos.max(axis=(1, 2, 3), keepdims=True)
    labels = rng.integers(0, classes, size=n)
    images = protos[labels] + rng.normal(0.0, noise, size=(n, c, h, w))
    return DatasetHandle(np.clip(images, 0.0, 1.0), labels.astype(np.int64), split, classes)


def digits_dataset(size=28, split="train"):
    """The 1797 handwritten digits bundled with scikit-learn, upsampled to
    ``size`` x ``size`` (bilinear) so they are MNIST-shaped."""
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits

    d = load_digits()
    imgs = d.images / 16.0
    factor = size / imgs.shape[1]
    up = np.stack([zoom(im, factor, order=1) for im in imgs])
    return DatasetHandle(np.clip(up, 0.0, 1.0)[:, None], d.target.astype(np.int64), split, 10)
