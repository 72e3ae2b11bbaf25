"""Dataset files and the bundled synthetic image benchmark.

File layout (one file per split), all integers little-endian:

    b"NSDS"  u8 version  u8 split (0 train, 1 test)
    u32 n_samples  u32 n_class  u32 ndim  u32 dims[ndim]
    f32 images[n_samples * prod(dims)]
    u32 labels[n_samples]
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ParameterError
from .fileformat import atomic_write

MAGIC = b"NSDS"
VERSION = 1
SPLITS = ("train", "test")


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, *shape), float64
    labels: np.ndarray  # (N,), int64
    n_class: int
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise DataError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        bad = np.flatnonzero((self.labels < 0) | (self.labels >= self.n_class))
        if bad.size:
            raise DataError(f"label {self.labels[bad[0]]} at index {bad[0]} outside [0, {self.n_class})")
        if self.split not in SPLITS:
            raise DataError(f"unknown split tag {self.split!r}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def to_bytes(self) -> bytes:
        head = MAGIC + bytes([VERSION, SPLITS.index(self.split)])
        head += struct.pack(f"<III{len(self.shape)}I", len(self), self.n_class, len(self.shape), *self.shape)
        return (head + self.inputs.astype("<f4").tobytes()
                + self.labels.astype("<u4").tobytes())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Dataset":
        if len(raw) < 18:
            raise FormatError("dataset file shorter than its header", len(raw))
        if raw[:4] != MAGIC:
            raise FormatError("dataset file does not start with magic NSDS", 0)
        if raw[4] != VERSION:
            raise FormatError(f"unsupported dataset version {raw[4]}", 4)
        if raw[5] >= len(SPLITS):
            raise FormatError(f"unknown split tag {raw[5]}", 5)
        n, n_class, ndim = struct.unpack_from("<III", raw, 6)
        pos = 18
        if len(raw) < pos + 4 * ndim:
            raise FormatError("dataset header truncated inside the dimension list", len(raw))
        dims = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        count = n * int(np.prod(dims, dtype=np.int64))
        expected = pos + 4 * count + 4 * n
        if len(raw) < expected:
            raise FormatError(f"dataset truncated: expected {expected} bytes", len(raw))
        if len(raw) > expected:
            raise FormatError("trailing bytes after labels", expected)
        images = np.frombuffer(raw, "<f4", count, pos).astype(np.float64).reshape(n, *dims)
        labels = np.frombuffer(raw, "<u4", n, pos + 4 * count).astype(np.int64)
        return cls(images, labels, n_class, SPLITS[raw[5]])

    def save(self, path) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "Dataset":
        return cls.from_bytes(Path(path).read_bytes())

    def rounded(self) -> "Dataset":
        """Copy with images rounded to float32, as they are after a save/load."""
        return Dataset(self.inputs.astype(np.float32).astype(np.float64), self.labels, self.n_class, self.split)


def _pattern(kind: int, n_class: int, yy, xx, rng) -> np.ndarray:
    """One noiseless class pattern: an oriented grating with a class-specific
    orientation, plus a soft blob whose position depends on the class."""
    theta = np.pi * kind / n_class + rng.normal(0.0, 0.12)
    freq = rng.uniform(0.55, 0.85)
    phase = rng.uniform(0, 2 * np.pi)
    grating = np.cos(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    angle = 2 * np.pi * kind / n_class
    cy = 0.5 + 0.25 * np.sin(angle) + rng.normal(0, 0.08)
    cx = 0.5 + 0.25 * np.cos(angle) + rng.normal(0, 0.08)
    h, w = yy.shape
    blob = np.exp(-(((yy / h - cy) ** 2 + (xx / w - cx) ** 2) / 0.02))
    return 0.6 * grating + 0.8 * blob


def gen_synthetic(seed: int = 0, n_class: int = 4, n_per_class: int = 250, shape=(1, 16, 16),
                  noise: float = 1.3, test_fraction: float = 0.2) -> tuple[Dataset, Dataset]:
    """Class-conditional images with seeded noise, split train/test per class.

    Images are generated in float32 precision so the returned arrays equal
    what a save/load round trip yields.
    """
    if n_class < 2:
        raise ParameterError(f"need at least 2 classes, got {n_class}")
    if n_per_class < 2:
        raise ParameterError(f"need at least 2 samples per class, got {n_per_class}")
    c, h, w = shape
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    n_test = max(1, int(round(n_per_class * test_fraction)))
    train_x, train_y, test_x, test_y = [], [], [], []
    for k in range(n_class):
        for j in range(n_per_class):
            img = np.stack([_pattern(k, n_class, yy, xx, rng) for _ in range(c)])
            img += noise * rng.normal(size=img.shape)
            if j < n_per_class - n_test:
                train_x.append(img)
                train_y.append(k)
            else:
                test_x.append(img)
                test_y.append(k)

    def build(xs, ys, split):
        perm = rng.permutation(len(ys))
        x = np.stack(xs)[perm].astype(np.float32).astype(np.float64)
        return Dataset(x, np.array(ys)[perm], n_class, split)

    return build(train_x, train_y, "train"), build(test_x, test_y, "test")


def write_synthetic(out_dir, **kwargs) -> tuple[Path, Path]:
    train, test = gen_synthetic(**kwargs)
    out_dir = Path(out_dir)
    paths = out_dir / "train.nsds", out_dir / "test.nsds"
    train.save(paths[0])
    test.save(paths[1])
    return paths


def load_split(path, split: str) -> Dataset:
    """``path`` is either a dataset file or a directory holding ``<split>.nsds``."""
    path = Path(path)
    if path.is_dir():
        path = path / f"{split}.nsds"
    if not path.exists():
        raise DataError(f"dataset file {path} does not exist")
    return Dataset.load(path)
