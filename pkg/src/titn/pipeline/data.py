"""Dataset readers (MNIST IDX, CIFAR binary) and a synthetic toy set."""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] uint8
    labels: np.ndarray  # [N] int64
    num_classes: int
    split: str = "train"
    name: str = ""

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DatasetFormatError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetFormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def image_size(self) -> int:
        return self.images.shape[2]

    def channel_stats(self) -> tuple[list, list]:
        """Per-channel mean and population std of the raw pixel values."""
        x = self.images.astype(np.float64)
        return x.mean(axis=(0, 2, 3)).tolist(), x.std(axis=(0, 2, 3)).tolist()

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.num_classes, self.split, self.name)


def _read(path: Path) -> bytes:
    raw = path.read_bytes()
    return gzip.decompress(raw) if path.suffix == ".gz" else raw


def _find(directory: Path, names: list) -> Path:
    for name in names:
        for candidate in (directory / name, directory / (name + ".gz")):
            if candidate.exists():
                return candidate
    raise FileNotFoundError(f"none of {names} found under {directory}")


# -- MNIST -------------------------------------------------------------------------

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049


def parse_idx_images(buf: bytes) -> np.ndarray:
    if len(buf) < 16:
        raise DatasetFormatError("IDX image file shorter than its header")
    magic, n, rows, cols = struct.unpack_from(">IIII", buf, 0)
    if magic != IDX_IMAGES_MAGIC:
        raise DatasetFormatError(f"IDX image magic {magic} != {IDX_IMAGES_MAGIC}")
    need = 16 + n * rows * cols
    if len(buf) < need:
        raise DatasetFormatError(f"IDX image file truncated: {len(buf)} of {need} bytes")
    return np.frombuffer(buf, dtype=np.uint8, count=n * rows * cols, offset=16).reshape(n, 1, rows, cols).copy()


def parse_idx_labels(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise DatasetFormatError("IDX label file shorter than its header")
    magic, n = struct.unpack_from(">II", buf, 0)
    if magic != IDX_LABELS_MAGIC:
        raise DatasetFormatError(f"IDX label magic {magic} != {IDX_LABELS_MAGIC}")
    if len(buf) < 8 + n:
        raise DatasetFormatError(f"IDX label file truncated: {len(buf)} of {8 + n} bytes")
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=8).astype(np.int64)


def write_idx(image_path, label_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write ``[N, 1, H, W]`` (or ``[N, H, W]``) uint8 images and labels as IDX."""
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim == 4:
        images = images[:, 0]
    n, rows, cols = images.shape
    Path(image_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(label_path).write_bytes(
        struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + np.asarray(labels, dtype=np.uint8).tobytes())


def load_mnist(path, split: str = "train") -> Dataset:
    """Read the standard MNIST IDX pair for ``split`` from a directory."""
    root = Path(path)
    prefix = "train" if split == "train" else "t10k"
    images = parse_idx_images(_read(_find(root, [f"{prefix}-images-idx3-ubyte", f"{prefix}-images.idx3-ubyte"])))
    labels = parse_idx_labels(_read(_find(root, [f"{prefix}-labels-idx1-ubyte", f"{prefix}-labels.idx1-ubyte"])))
    if images.shape[0] != labels.shape[0]:
        raise DatasetFormatError(f"MNIST {split}: {images.shape[0]} images vs {labels.shape[0]} labels")
    if labels.size and labels.max() >= 10:
        raise DatasetFormatError(f"MNIST {split}: label {labels.max()} out of range")
    return Dataset(images, labels, 10, split, "mnist")


# -- CIFAR -------------------------------------------------------------------------

CIFAR_PIXELS = 3 * 32 * 32


def parse_cifar(buf: bytes, variant: int) -> tuple[np.ndarray, np.ndarray]:
    """Decode CIFAR binary records; CIFAR-100 keeps the fine label."""
    label_bytes = 1 if variant == 10 else 2
    record = label_bytes + CIFAR_PIXELS
    if len(buf) % record:
        raise DatasetFormatError(
            f"CIFAR-{variant}: {len(buf)} bytes is not a multiple of the {record}-byte record")
    rows = np.frombuffer(buf, dtype=np.uint8).reshape(-1, record)
    labels = rows[:, label_bytes - 1].astype(np.int64)
    if labels.size and labels.max() >= variant:
        raise DatasetFormatError(f"CIFAR-{variant}: label {labels.max()} out of range")
    images = rows[:, label_bytes:].reshape(-1, 3, 32, 32).copy()
    return images, labels


def write_cifar(path, images: np.ndarray, labels: np.ndarray, variant: int = 10,
                coarse: Optional[np.ndarray] = None) -> None:
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), CIFAR_PIXELS)
    cols = [np.asarray(labels, dtype=np.uint8)[:, None]]
    if variant == 100:
        coarse = np.zeros(len(labels), np.uint8) if coarse is None else np.asarray(coarse, np.uint8)
        cols.insert(0, coarse[:, None])
    Path(path).write_bytes(np.concatenate(cols + [images], axis=1).tobytes())


def load_cifar(path, variant: int = 10, split: str = "train") -> Dataset:
    """Read CIFAR-10/100 binary batches from ``path`` (a directory or one file)."""
    if variant not in (10, 100):
        raise ValueError(f"variant must be 10 or 100, got {variant}")
    root = Path(path)
    if root.is_file():
        files = [root]
    else:
        sub = root / ("cifar-10-batches-bin" if variant == 10 else "cifar-100-binary")
        if sub.is_dir():
            root = sub
        if variant == 10:
            names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
        else:
            names = ["train.bin" if split == "train" else "test.bin"]
        files = [root / n for n in names]
        missing = [str(f) for f in files if not f.exists()]
        if missing:
            raise FileNotFoundError(f"missing CIFAR files: {missing}")
    parts = [parse_cifar(_read(f), variant) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return Dataset(images, labels, variant, split, f"cifar{variant}")


# -- synthetic -----------------------------------------------------------------------

def make_synthetic(num_classes: int = 3, n_train: int = 1500, n_test: int = 300,
                   image_size: int = 8, channels: int = 3, noise: float = 40.0,
                   seed: int = 0) -> tuple[Dataset, Dataset]:
    """Balanced toy classification set.

    Class ``k`` brightens channel ``k % channels`` with a horizontal grating
    of ``1 + k // channels`` cycles per image height, so classes differ in
    both color and frequency and survive flips and small shifts. Gaussian
    pixel noise is drawn from ``seed``.
    """
    rows = np.arange(image_size)
    templates = np.full((num_classes, channels, image_size, image_size), 100.0)
    for k in range(num_classes):
        freq = 1 + k // channels
        wave = 60.0 * np.cos(2 * np.pi * freq * rows / image_size)
        templates[k, k % channels] += 50.0 + wave[:, None]

    def draw(n, rng, split):
        labels = np.arange(n) % num_classes
        x = templates[labels] + rng.normal(0.0, noise, size=(n, channels, image_size, image_size))
        images = np.clip(np.rint(x), 0, 255).astype(np.uint8)
        return Dataset(images, labels.astype(np.int64), num_classes, split, "synthetic")

    train_rng, test_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    return draw(n_train, train_rng, "train"), draw(n_test, test_rng, "test")


def resize(ds: Dataset, size: int) -> Dataset:
    """Bilinear resize to ``size x size`` (used to bring MNIST to 32 px)."""
    if ds.image_size == size:
        return ds
    from scipy.ndimage import zoom

    f = size / ds.image_size
    x = zoom(ds.images.astype(np.float64), (1, 1, f, f), order=1)
    images = np.clip(np.rint(x), 0, 255).astype(np.uint8)
    return Dataset(images, ds.labels, ds.num_classes, ds.split, ds.name)
