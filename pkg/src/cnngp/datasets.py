"""Image dataset ingestion, preprocessing and synthetic generators."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .data_model import InputSet

CIFAR_RECORD = 1 + 3 * 32 * 32
IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class RawDataset:
    """Images ``(N, C, H, W)`` with integer labels in ``[0, num_classes)``."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: tuple = ()

    def __post_init__(self):
        images = np.asarray(self.images)
        labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if images.ndim != 4:
            raise DatasetFormatError(f"images must be (N, C, H, W), got {images.shape}")
        if labels.size != images.shape[0]:
            raise DatasetFormatError(f"{labels.size} labels for {images.shape[0]} images")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DatasetFormatError(f"labels outside [0, {self.num_classes})")
        split = tuple(self.split) if len(self.split) else ("train",) * labels.size
        if len(split) != labels.size:
            raise DatasetFormatError("split tags do not match sample count")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "split", split)

    def __len__(self) -> int:
        return self.labels.size

    def take(self, index) -> "RawDataset":
        index = np.asarray(index, dtype=np.int64)
        return RawDataset(self.images[index], self.labels[index], self.num_classes,
                          tuple(self.split[i] for i in index.tolist()))

    def with_split(self, tag: str) -> "RawDataset":
        return replace(self, split=(tag,) * len(self))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def concat(*parts: RawDataset) -> RawDataset:
    C = max(p.num_classes for p in parts)
    return RawDataset(np.concatenate([p.images for p in parts]),
                      np.concatenate([p.labels for p in parts]), C,
                      sum((p.split for p in parts), ()))


# ---------------------------------------------------------------------------
# Loaders
# ---------------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = os.fspath(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def load_cifar_binary(paths, split: str = "train") -> RawDataset:
    """CIFAR-10 binary batches: per record one label byte and 3x32x32 uint8 pixels."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise DatasetFormatError(
                f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD} bytes")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        lab = rec[:, 0]
        if lab.max() >= 10:
            raise DatasetFormatError(f"{path}: label byte {int(lab.max())} >= 10")
        labels.append(lab.astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    return RawDataset(images, labels, 10, (split,) * labels.size)


def _read_idx(path, expected_magic: int) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise DatasetFormatError(f"{path}: truncated IDX header")
    magic, = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DatasetFormatError(f"{path}: magic {magic:#010x}, expected {expected_magic:#010x}")
    ndim = magic & 0xFF
    dims = struct.unpack(">" + "I" * ndim, raw[4:4 + 4 * ndim])
    body = raw[4 + 4 * ndim:]
    if len(body) != int(np.prod(dims)):
        raise DatasetFormatError(f"{path}: payload of {len(body)} bytes for dims {dims}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10, split: str = "train") -> RawDataset:
    """MNIST-style IDX image and label files (optionally gzipped)."""
    images = _read_idx(images_path, IDX_IMAGES)
    labels = _read_idx(labels_path, IDX_LABELS).astype(np.int64)
    return RawDataset(images[:, None, :, :], labels, num_classes, (split,) * labels.size)


def save_npz(path, ds: RawDataset):
    np.savez(path, images=ds.images, labels=ds.labels, num_classes=ds.num_classes,
             split=np.array(ds.split))


def load_npz(path) -> RawDataset:
    with np.load(path, allow_pickle=False) as f:
        return RawDataset(f["images"], f["labels"], int(f["num_classes"]),
                          tuple(str(s) for s in f["split"]))


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def normalize_images(images: np.ndarray) -> np.ndarray:
    """Per-image zero mean and unit variance over all channels and pixels."""
    x = np.asarray(images, dtype=np.float64)
    flat = x.reshape(x.shape[0], -1)
    mean = flat.mean(axis=1, keepdims=True)
    centered = flat - mean
    std = np.sqrt(np.mean(centered * centered, axis=1, keepdims=True))
    bad = np.flatnonzero(std[:, 0] == 0)
    if bad.size:
        raise ValueError(f"constant images cannot be normalized: {bad[:10].tolist()}")
    return (centered / std).reshape(x.shape)


def to_input_set(ds: RawDataset, normalized: bool = True, spatial_rank: Optional[int] = None) -> InputSet:
    """Convert to an :class:`InputSet`; ``H == 1`` images become 1D unless told otherwise."""
    x = normalize_images(ds.images) if normalized else np.asarray(ds.images, dtype=np.float64)
    if spatial_rank is None:
        spatial_rank = 1 if x.shape[2] == 1 else 2
    if spatial_rank == 1:
        x = x.reshape(x.shape[0], x.shape[1], -1)
    return InputSet(x)


def normalize(ds: RawDataset) -> InputSet:
    return to_input_set(ds, normalized=True)


def balanced_subset_indices(ds: RawDataset, per_class: int, seed: int,
                            exclude: Sequence[int] = ()) -> np.ndarray:
    """Sorted indices of ``per_class`` random samples of every class.

    Indices in ``exclude`` are never chosen (used to draw disjoint splits).
    """
    rng = np.random.default_rng(seed)
    excluded = np.zeros(len(ds), dtype=bool)
    excluded[np.asarray(exclude, dtype=np.int64)] = True
    chosen = []
    for c in range(ds.num_classes):
        pool = np.flatnonzero((ds.labels == c) & ~excluded)
        if pool.size < per_class:
            raise ValueError(f"class {c} has {pool.size} samples, {per_class} requested")
        chosen.append(rng.choice(pool, size=per_class, replace=False))
    return np.sort(np.concatenate(chosen))


def balanced_subset(ds: RawDataset, per_class: int, seed: int,
                    exclude: Sequence[int] = ()) -> RawDataset:
    """Class-balanced random subset, deterministic per seed."""
    return ds.take(balanced_subset_indices(ds, per_class, seed, exclude))


def _source_coords(n_out: int, n_in: int) -> np.ndarray:
    scale = n_in / n_out
    return (np.arange(n_out) + 0.5) * scale - 0.5


def _resize_axis(x: np.ndarray, n_out: int, axis: int, method: str) -> np.ndarray:
    n_in = x.shape[axis]
    if n_out == n_in:
        return x
    src = _source_coords(n_out, n_in)
    if method == "nearest":
        idx = np.clip(np.floor(src).astype(np.int64), 0, n_in - 1)
        return np.take(x, idx, axis=axis)
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    shape = [1] * x.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    return np.take(x, lo, axis=axis) * (1 - frac) + np.take(x, hi, axis=axis) * frac


def downsample_images(images: np.ndarray, height: int, width: int,
                      method: str = "bilinear") -> np.ndarray:
    """Resize ``(..., H, W)`` images; pixel centers map as ``(i + 0.5) * scale - 0.5``."""
    if method not in ("bilinear", "nearest"):
        raise ValueError(f"unknown method {method!r}")
    if height < 1 or width < 1:
        raise ValueError("target size must be positive")
    x = np.asarray(images, dtype=np.float64)
    if height > x.shape[-2] or width > x.shape[-1]:
        raise ValueError(f"target {height}x{width} larger than source {x.shape[-2:]}")
    x = _resize_axis(x, height, x.ndim - 2, method)
    return _resize_axis(x, width, x.ndim - 1, method)


def downsample(ds: RawDataset, height: int, width: int, method: str = "bilinear") -> RawDataset:
    return replace(ds, images=downsample_images(ds.images, height, width, method))


def preprocess(ds: RawDataset, size: Optional[tuple] = None, method: str = "bilinear",
               normalize_first: bool = False) -> InputSet:
    """Downsample then normalize (or the reverse) and convert to an input set."""
    x = np.asarray(ds.images, dtype=np.float64)
    if normalize_first:
        x = normalize_images(x)
    if size is not None:
        x = downsample_images(x, size[0], size[1], method)
    if not normalize_first:
        x = normalize_images(x)
    return to_input_set(replace(ds, images=x), normalized=False)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic dataset description.

    ``blobs``: per class a random prototype image plus Gaussian noise of scale
    ``noise``, ``per_class`` samples each. ``shift``: ``orbits`` random base
    images, each emitted with ``shifts`` circular shifts along the width axis;
    orbit ``o`` gets label ``o % num_classes``.
    """

    kind: str = "blobs"
    num_classes: int = 2
    per_class: int = 4
    channels: int = 1
    height: int = 1
    width: int = 8
    noise: float = 0.5
    orbits: int = 2
    shifts: int = 0
    test_fraction: float = 0.0

    def __post_init__(self):
        if self.kind not in ("blobs", "shift"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if min(self.num_classes, self.channels, self.height, self.width) < 1:
            raise ValueError("sizes must be positive")


def synth_dataset(spec: SynthSpec, seed: int) -> RawDataset:
    rng = np.random.default_rng(seed)
    shape = (spec.channels, spec.height, spec.width)
    if spec.kind == "blobs":
        protos = rng.standard_normal((spec.num_classes,) + shape)
        labels = np.repeat(np.arange(spec.num_classes), spec.per_class)
        images = protos[labels] + spec.noise * rng.standard_normal((labels.size,) + shape)
    else:
        shifts = spec.shifts or spec.width
        bases = rng.standard_normal((spec.orbits,) + shape)
        images = np.stack([np.roll(bases[o], s, axis=-1)
                           for o in range(spec.orbits) for s in range(shifts)])
        labels = np.repeat(np.arange(spec.orbits) % spec.num_classes, shifts)
    split = ["train"] * labels.size
    if spec.test_fraction > 0:
        n_test = int(round(spec.test_fraction * labels.size))
        for i in rng.choice(labels.size, size=n_test, replace=False):
            split[i] = "test"
    return RawDataset(images, labels, spec.num_classes, tuple(split))
