"""Synthetic classification tasks and an IDX (MNIST-layout) reader."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "spirals"
    classes: int = 3
    samples_per_class: int = 300
    input_dim: int = 2
    noise: float = 0.1
    spacing: float = 4.0
    turns: float = 1.0
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    fractions: tuple[float, float, float] = (0.81, 0.09, 0.10)

    def __post_init__(self):
        if self.kind not in ("gaussians", "spirals", "idx-images"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if len(self.fractions) != 3 or min(self.fractions) < 0 or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {self.fractions}")
        if self.kind != "idx-images" and self.samples_per_class < 1:
            raise ValueError("samples_per_class must be positive")


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return int(self.y.shape[0])


@dataclass
class Dataset:
    train: Split
    val: Split
    test: Split
    num_classes: int

    @property
    def input_dim(self) -> int:
        return int(self.train.x.shape[1])

    def split(self, name: str) -> Split:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def _split(x: np.ndarray, y: np.ndarray, fractions, rng: np.random.Generator, k: int) -> Dataset:
    n = y.shape[0]
    perm = rng.permutation(n)
    x, y = x[perm], y[perm]
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    n_val = min(n_val, n - n_train)
    return Dataset(Split(x[:n_train], y[:n_train]),
                   Split(x[n_train:n_train + n_val], y[n_train:n_train + n_val]),
                   Split(x[n_train + n_val:], y[n_train + n_val:]), k)


def _gaussian_centers(spec: DatasetSpec) -> np.ndarray:
    k, d = spec.classes, spec.input_dim
    centers = np.zeros((k, d))
    if k <= d:
        centers[np.arange(k), np.arange(k)] = spec.spacing / math.sqrt(2.0)
    else:
        if d < 2:
            raise ValueError("more than input_dim classes needs input_dim >= 2")
        radius = spec.spacing / (2.0 * math.sin(math.pi / k))
        ang = 2.0 * math.pi * np.arange(k) / k
        centers[:, 0] = radius * np.cos(ang)
        centers[:, 1] = radius * np.sin(ang)
    return centers


def generate_synthetic(spec: DatasetSpec, rng: np.random.Generator) -> Dataset:
    if spec.kind == "idx-images":
        raise ValueError("idx-images datasets are loaded from files, see load_idx")
    k, n = spec.classes, spec.samples_per_class
    y = np.repeat(np.arange(k), n)
    if spec.kind == "gaussians":
        centers = _gaussian_centers(spec)
        x = centers[y] + spec.noise * rng.standard_normal((k * n, spec.input_dim))
    else:
        t = rng.uniform(0.05, 1.0, size=k * n)
        ang = 2.0 * math.pi * (y / k + spec.turns * t)
        x = np.stack([t * np.cos(ang), t * np.sin(ang)], axis=1)
        x += spec.noise * rng.standard_normal(x.shape)
    return _split(x, y, spec.fractions, rng, k)


def _read_idx(path: str | Path, magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{path}: file too short for an IDX header (offset 0)")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x} at offset 0, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension block at offset 4")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise FormatError(f"{path}: payload size mismatch at offset {header}: "
                          f"expected {expected - header} bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def read_idx_pair(images: str | Path, labels: str | Path) -> tuple[np.ndarray, np.ndarray]:
    img = _read_idx(images, IDX_IMAGES)
    lab = _read_idx(labels, IDX_LABELS)
    if img.shape[0] != lab.shape[0]:
        raise FormatError(f"{images}: {img.shape[0]} images but {labels} has {lab.shape[0]} labels (offset 4)")
    x = img.reshape(img.shape[0], -1).astype(np.float64) / 255.0
    return x, lab.astype(np.int64)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    a = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | a.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(">" + "I" * a.ndim, *a.shape))
        fh.write(a.tobytes())


def load_idx(train_images, train_labels, test_images, test_labels,
             rng: np.random.Generator, val_fraction: float = 0.10) -> Dataset:
    xtr, ytr = read_idx_pair(train_images, train_labels)
    xte, yte = read_idx_pair(test_images, test_labels)
    perm = rng.permutation(ytr.shape[0])
    n_val = int(round(ytr.shape[0] * val_fraction))
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    k = int(max(ytr.max(initial=0), yte.max(initial=0))) + 1
    return Dataset(Split(xtr[tr_idx], ytr[tr_idx]), Split(xtr[val_idx], ytr[val_idx]), Split(xte, yte), max(k, 2))


def build_dataset(spec: DatasetSpec, rng: np.random.Generator) -> Dataset:
    if spec.kind == "idx-images":
        paths = (spec.train_images, spec.train_labels, spec.test_images, spec.test_labels)
        if not all(paths):
            raise ValueError("idx-images needs train/test image and label paths")
        return load_idx(*paths, rng=rng)
    if spec.samples_per_class < 1:
        raise ValueError("degenerate dataset spec: zero samples")
    return generate_synthetic(spec, rng)
