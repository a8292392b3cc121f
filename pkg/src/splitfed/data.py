"""Dataset ingestion (IDX files, synthetic blobs) and uniform partitioning."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagic, DimMismatch, TooManyClients, Truncated

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Samples plus integer class labels.

    `images` is (N, H, W, C) in [0, 1] for image data, or (N, d) raw
    feature vectors for the synthetic generator.
    """

    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.images.shape[0]

    def take(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices])


@dataclass(frozen=True)
class Shard:
    client_id: int
    indices: np.ndarray

    def __len__(self) -> int:
        return int(self.indices.shape[0])


def _read_all(path: str) -> bytes:
    if str(path).endswith(".gz"):
        with gzip.open(path, "rb") as fh:
            return fh.read()
    with open(path, "rb") as fh:
        return fh.read()


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Parse a big-endian IDX image/label file pair; pixels scaled by 1/255."""
    raw_images = _read_all(images_path)
    raw_labels = _read_all(labels_path)
    if len(raw_images) < 16 or len(raw_labels) < 8:
        raise Truncated("IDX header incomplete")
    magic, n, rows, cols = struct.unpack(">IIII", raw_images[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise BadMagic(f"image magic 0x{magic:08x} != 0x{IDX_IMAGES_MAGIC:08x}")
    lmagic, ln = struct.unpack(">II", raw_labels[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise BadMagic(f"label magic 0x{lmagic:08x} != 0x{IDX_LABELS_MAGIC:08x}")
    if n != ln:
        raise DimMismatch(f"{n} images vs {ln} labels")
    if len(raw_images) - 16 != n * rows * cols:
        raise Truncated(f"expected {n * rows * cols} pixel bytes, got {len(raw_images) - 16}")
    if len(raw_labels) - 8 != n:
        raise Truncated(f"expected {n} label bytes, got {len(raw_labels) - 8}")
    pixels = np.frombuffer(raw_images, dtype=np.uint8, offset=16)
    images = pixels.reshape(n, rows, cols, 1).astype(np.float64) / 255.0
    labels = np.frombuffer(raw_labels, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(images, labels)


def encode_idx_images(images_uint8: np.ndarray) -> bytes:
    n, rows, cols = images_uint8.shape[:3]
    return struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images_uint8.tobytes()


def encode_idx_labels(labels: np.ndarray) -> bytes:
    return struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.astype(np.uint8).tobytes()


def synthetic(n: int, dim: int, classes: int, seed: int, center_seed: int | None = None) -> Dataset:
    """Gaussian blobs: class c centered at a seeded random unit vector
    scaled by 3, unit covariance. Labels cycle 0..classes-1.

    `center_seed` pins the class centers independently of the sample
    noise, so a train/test pair drawn with different `seed` values but a
    shared `center_seed` comes from the same distribution.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    center_rng = np.random.Generator(np.random.PCG64(seed if center_seed is None else center_seed))
    centers = center_rng.normal(size=(classes, dim))
    centers *= 3.0 / np.linalg.norm(centers, axis=1, keepdims=True)
    rng = np.random.Generator(np.random.PCG64(seed))
    labels = np.arange(n, dtype=np.int64) % classes
    images = centers[labels] + rng.normal(size=(n, dim))
    return Dataset(images, labels)


def partition_uniform(dataset: Dataset, clients: int, seed: int) -> list[Shard]:
    """Seeded shuffle, then contiguous blocks of floor(N/K); the first
    N mod K shards get one extra sample."""
    n = len(dataset)
    if clients < 1 or clients > n:
        raise TooManyClients(f"cannot split {n} samples across {clients} clients")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(n)
    base, extra = divmod(n, clients)
    shards = []
    start = 0
    for k in range(clients):
        size = base + (1 if k < extra else 0)
        shards.append(Shard(k, order[start : start + size]))
        start += size
    return shards


def pad_images(images: np.ndarray, target_shape: tuple[int, ...]) -> np.ndarray:
    """Zero-pad (N, H, W, C) images up to the architecture's declared
    input, centered; no-op when shapes already match."""
    if images.shape[1:] == target_shape:
        return images
    if images.ndim != 4 or len(target_shape) != 3:
        raise DimMismatch(f"cannot pad {images.shape[1:]} to {target_shape}")
    n = images.shape[0]
    th, tw, tc = target_shape
    h, w, c = images.shape[1:]
    if h > th or w > tw or c != tc:
        raise DimMismatch(f"cannot pad {images.shape[1:]} to {target_shape}")
    top, left = (th - h) // 2, (tw - w) // 2
    out = np.zeros((n, th, tw, tc))
    out[:, top : top + h, left : left + w, :] = images
    return out
