"""Datasets: MNIST IDX files, COIL-20 style PGM directories, synthetic blobs."""

from __future__ import annotations

import gzip
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .pnm import PgmError, read_pgm

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

_COIL_NAME = re.compile(r"^obj(\d+)__(\d+)\.pgm$")


class DataError(ValueError):
    """Base class for dataset ingestion failures."""


class BadMagicError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class CountMismatchError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


@dataclass
class Dataset:
    """Images of shape (N, C, H, W) in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index, name: str | None = None) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.images[index], self.labels[index], name or self.name, dict(self.meta))


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        raw = f.read()
    # MNIST is distributed gzipped
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, expected_magic: int, name: str = "<bytes>") -> np.ndarray:
    """Decode an unsigned-byte IDX payload into a uint8 array of its stated dims."""
    if len(raw) < 4:
        raise TruncatedFileError(f"{name}: {len(raw)} bytes, too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{name}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{name}: header needs {header} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header < count:
        raise TruncatedFileError(f"{name}: expected {count} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def encode_idx(array: np.ndarray) -> bytes:
    arr = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def write_idx(array: np.ndarray, path, compress: bool | None = None) -> None:
    """Write a uint8 array as IDX; gzip when ``compress`` or the name ends in .gz."""
    payload = encode_idx(array)
    if compress is None:
        compress = str(path).endswith(".gz")
    if compress:
        payload = gzip.compress(payload, mtime=0)
    with open(path, "wb") as f:
        f.write(payload)


def load_idx(images_path, labels_path, name: str = "mnist") -> Dataset:
    images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, str(images_path))
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if len(images) != len(labels):
        raise CountMismatchError(
            f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels")
    pixels = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(pixels, labels.astype(np.int64), name)


def load_pgm_dir(directory, name: str = "coil20") -> Dataset:
    """Load ``obj{K}__{I}.pgm`` files; label is K-1, ordered by (K, I)."""
    directory = Path(directory)
    entries = []
    for path in directory.iterdir():
        if path.is_dir():
            continue
        m = _COIL_NAME.match(path.name)
        if m is None:
            raise DataError(f"unexpected filename {path.name!r} in {directory}")
        k, i = int(m.group(1)), int(m.group(2))
        if not (1 <= k <= 20 and 0 <= i <= 71):
            raise DataError(f"unexpected filename {path.name!r}: object or pose out of range")
        entries.append((k, i, path))
    if not entries:
        raise EmptyDatasetError(f"no PGM files in {directory}")
    entries.sort()
    images = []
    for _, _, path in entries:
        try:
            images.append(read_pgm(path))
        except PgmError as exc:
            raise DataError(str(exc)) from None
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise DataError(f"{directory}: images have differing dims {sorted(shapes)}")
    labels = [k - 1 for k, _, _ in entries]
    return Dataset(np.stack(images)[:, None], np.array(labels), name)


def resize_bilinear(dataset: Dataset, height: int, width: int) -> Dataset:
    """Corner-aligned bilinear resampling of every image."""
    if height < 1 or width < 1:
        raise ValueError(f"target dims must be positive, got {height}x{width}")
    imgs = dataset.images
    h, w = imgs.shape[2:]

    def axis(src, dst):
        pos = np.zeros(dst) if dst == 1 else np.arange(dst) * ((src - 1) / (dst - 1))
        lo = np.minimum(np.floor(pos).astype(np.int64), src - 1)
        hi = np.minimum(lo + 1, src - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, height)
    x0, x1, fx = axis(w, width)
    fy = fy[:, None]
    top = imgs[:, :, y0][..., x0] * (1 - fx) + imgs[:, :, y0][..., x1] * fx
    bottom = imgs[:, :, y1][..., x0] * (1 - fx) + imgs[:, :, y1][..., x1] * fx
    out = np.clip(top * (1 - fy) + bottom * fy, 0.0, 1.0)
    return Dataset(out, dataset.labels.copy(), dataset.name, dict(dataset.meta))


def split(dataset: Dataset, train_count: int, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded uniform partition into ``train_count`` training items and the rest."""
    n = len(dataset)
    if not 0 <= train_count <= n:
        raise ValueError(f"train_count {train_count} outside [0, {n}]")
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.subset(perm[:train_count]), dataset.subset(perm[train_count:])


def synthetic_blobs(k: int, per_cluster: int, dim: int, spread: float, seed: int) -> Dataset:
    """Gaussian clusters around centers drawn uniformly in [0.2, 0.8]^dim.

    Points are stored as (N, 1, 1, dim) so they pass through the same
    Dataset plumbing as images; values are clipped to [0, 1].
    """
    if min(k, per_cluster, dim) < 1 or spread < 0:
        raise ValueError("k, per_cluster and dim must be positive and spread non-negative")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(k, dim))
    labels = np.repeat(np.arange(k), per_cluster)
    points = centers[labels] + spread * rng.standard_normal((k * per_cluster, dim))
    points = np.clip(points, 0.0, 1.0)
    return Dataset(points[:, None, None, :], labels, "blobs", {"centers": centers})


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless index batches drawn from successive seeded permutations.

    Batches always hold ``min(batch_size, n)`` indices and may straddle two
    permutations.
    """
    if n < 1:
        raise EmptyDatasetError("cannot batch an empty dataset")
    size = min(batch_size, n)
    pending = np.empty(0, dtype=np.int64)
    while True:
        while len(pending) < size:
            pending = np.concatenate([pending, rng.permutation(n)])
        yield pending[:size]
        pending = pending[size:]
