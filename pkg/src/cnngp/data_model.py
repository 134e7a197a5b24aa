"""Covariance containers, architecture configuration and input sets.

Kernel tensors are dense float64 arrays laid out sample-major, pixel-minor:

* ``CovFull.values`` has shape ``(N, N, *spatial, *spatial)`` and holds
  ``[K]_{a, a'}(x, x')`` at ``values[x, x', a..., a'...]``.
* ``CovDiag.values`` has shape ``(N, N, *spatial)`` and holds only the
  ``a == a'`` entries.

2D images keep their ``(h, w)`` shape on the tensor axes; ``flatten_cov``
collapses pixel tuples to a single row-major index when a matrix view is
needed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

NONLINEARITIES = ("relu", "erf")
PADDINGS = ("circular", "valid", "same")
CONNECTIVITIES = ("cnn", "lcn", "fcn")
READOUTS = ("vectorize", "pool", "subsample_pixel", "projection")
POST_OP_KINDS = ("stride", "avg_pool", "subsample_slice")


class ShapeError(ValueError):
    """Raised when array shapes are inconsistent with each other or a config."""


class SpatialCollapseError(ValueError):
    """Raised when valid padding or pooling shrinks the image below one pixel."""


# ---------------------------------------------------------------------------
# Inputs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InputSet:
    """A finite set of images, shape ``(N, n0, *spatial)`` with spatial rank 1 or 2."""

    samples: np.ndarray
    ids: tuple = ()

    def __post_init__(self):
        x = np.ascontiguousarray(self.samples, dtype=np.float64)
        if x.ndim not in (3, 4):
            raise ShapeError(
                f"samples must have shape (N, n0, d) or (N, n0, d1, d2), got {x.shape}")
        if x.shape[0] < 1:
            raise ShapeError("an input set needs at least one sample")
        if not np.all(np.isfinite(x)):
            raise ValueError("samples contain non-finite values")
        flat = x.reshape(x.shape[0], -1)
        zero = ~np.any(flat != 0.0, axis=1)
        if np.any(zero):
            raise ValueError(f"all-zero samples at positions {np.flatnonzero(zero).tolist()}")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        ids = tuple(self.ids) if len(self.ids) else tuple(range(x.shape[0]))
        if len(ids) != x.shape[0]:
            raise ShapeError(f"{len(ids)} ids for {x.shape[0]} samples")
        object.__setattr__(self, "ids", ids)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def channels(self) -> int:
        return self.samples.shape[1]

    @property
    def spatial_shape(self) -> tuple:
        return tuple(self.samples.shape[2:])

    @property
    def spatial_rank(self) -> int:
        return self.samples.ndim - 2

    @property
    def n_pixels(self) -> int:
        return int(np.prod(self.spatial_shape))

    def subset(self, index) -> "InputSet":
        index = np.asarray(index)
        return InputSet(self.samples[index], tuple(self.ids[i] for i in index.tolist()))

    def as_fcn(self) -> "InputSet":
        """View every image as a single pixel with all values as channels."""
        n = self.n_samples
        return InputSet(self.samples.reshape(n, -1, 1), self.ids)


# ---------------------------------------------------------------------------
# Architecture
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearPostOp:
    """Deterministic linear map on pixels applied after a layer's affine step.

    ``stride``: keep every ``stride``-th pixel. ``avg_pool``: average windows of
    ``window`` pixels taken every ``stride`` pixels. ``subsample_slice``: keep
    the contiguous pixels ``start .. start + window - 1``. 2D images apply the
    same 1D map along both spatial axes.
    """

    kind: str
    stride: int = 1
    window: int = 1
    start: int = 0

    def __post_init__(self):
        if self.kind not in POST_OP_KINDS:
            raise ValueError(f"unknown post-op kind {self.kind!r}")
        if self.stride < 1 or self.window < 1 or self.start < 0:
            raise ValueError("stride and window must be >= 1, start >= 0")

    def output_size(self, d: int) -> int:
        if self.kind == "stride":
            return -(-d // self.stride)
        if self.kind == "avg_pool":
            out = (d - self.window) // self.stride + 1
        else:
            out = self.window if self.start + self.window <= d else 0
        if out < 1:
            raise SpatialCollapseError(f"{self.kind} maps {d} pixels to {out}")
        return out

    def matrix(self, d: int) -> np.ndarray:
        """The ``(d_out, d)`` matrix ``B`` of this op along one spatial axis."""
        d2 = self.output_size(d)
        B = np.zeros((d2, d))
        rows = np.arange(d2)
        if self.kind == "stride":
            B[rows, rows * self.stride] = 1.0
        elif self.kind == "avg_pool":
            for i in rows:
                B[i, i * self.stride:i * self.stride + self.window] = 1.0 / self.window
        else:
            B[rows, self.start + rows] = 1.0
        return B

    def selection(self, d: int) -> Optional[np.ndarray]:
        """Selected source pixel per output pixel, or None for averaging ops."""
        if self.kind == "avg_pool" and self.window > 1:
            return None
        d2 = self.output_size(d)
        if self.kind == "subsample_slice":
            return self.start + np.arange(d2)
        return np.arange(d2) * self.stride


@dataclass(frozen=True)
class ReadoutSpec:
    """How the top-layer pixel kernel collapses into a sample-by-sample kernel.

    ``sigma_w2``/``sigma_b2`` of None inherit the hidden-layer values.
    """

    kind: str = "vectorize"
    pixel_index: Optional[int] = None
    h: Optional[tuple] = None
    sigma_w2: Optional[float] = None
    sigma_b2: Optional[float] = None

    def __post_init__(self):
        if self.kind not in READOUTS:
            raise ValueError(f"unknown readout {self.kind!r}")
        if self.kind == "subsample_pixel" and self.pixel_index is None:
            raise ValueError("subsample_pixel readout needs pixel_index")
        if self.kind == "projection":
            if self.h is None:
                raise ValueError("projection readout needs h")
            h = tuple(float(v) for v in np.ravel(self.h))
            if not all(np.isfinite(h)):
                raise ValueError("projection vector must be finite")
            object.__setattr__(self, "h", h)

    @property
    def tag(self) -> str:
        if self.kind == "subsample_pixel":
            return f"e{self.pixel_index}"
        return {"vectorize": "vec", "pool": "pool", "projection": "h"}[self.kind]

    def projection(self, d: int) -> Optional[np.ndarray]:
        """Projection vector over flattened pixels, None for vectorize."""
        if self.kind == "vectorize":
            return None
        if self.kind == "pool":
            return np.full(d, 1.0 / d)
        if self.kind == "subsample_pixel":
            if not 0 <= self.pixel_index < d:
                raise ShapeError(f"pixel_index {self.pixel_index} outside {d} pixels")
            h = np.zeros(d)
            h[self.pixel_index] = 1.0
            return h
        h = np.asarray(self.h, dtype=np.float64)
        if h.size != d:
            raise ShapeError(f"projection of length {h.size} for {d} pixels")
        return h

    def needs_full_track(self, d: int) -> bool:
        if self.kind in ("vectorize", "subsample_pixel") or d == 1:
            return False
        if self.kind == "pool":
            return True
        return np.count_nonzero(self.h) > 1


@dataclass(frozen=True)
class ArchConfig:
    """Hyperparameters of the network family whose NN-GP kernel is computed.

    ``depth`` counts convolutional (affine + nonlinearity) layers; ``depth=0``
    reads out directly from the input covariance. ``post_ops`` is a tuple of
    ``(layer, LinearPostOp)`` pairs; ops attached to a layer act on its
    pre-activations, in the listed order, before the nonlinearity.
    """

    depth: int = 1
    filter_half_width: int = 1
    sigma_w2: float = 1.0
    sigma_b2: float = 0.0
    nonlinearity: str = "relu"
    padding: str = "circular"
    connectivity: str = "cnn"
    v: Optional[tuple] = None
    post_ops: tuple = ()
    readout: ReadoutSpec = field(default_factory=ReadoutSpec)

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if self.filter_half_width < 0:
            raise ValueError("filter_half_width must be >= 0")
        if not self.sigma_w2 > 0:
            raise ValueError("sigma_w2 must be > 0")
        if not self.sigma_b2 >= 0:
            raise ValueError("sigma_b2 must be >= 0")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.padding not in PADDINGS:
            raise ValueError(f"unknown padding {self.padding!r}")
        if self.connectivity not in CONNECTIVITIES:
            raise ValueError(f"unknown connectivity {self.connectivity!r}")
        if self.connectivity == "fcn" and self.filter_half_width != 0:
            raise ValueError("fcn connectivity requires filter_half_width = 0")
        if self.v is not None:
            v = np.asarray(self.v, dtype=np.float64)
            width = 2 * self.filter_half_width + 1
            if v.ndim == 0 or any(s != width for s in v.shape):
                raise ShapeError(f"filter weights must have side {width}, got {v.shape}")
            if np.any(v < 0):
                raise ValueError("filter variance weights must be nonnegative")
            if abs(v.sum() - 1.0) > 1e-12:
                raise ValueError(f"filter variance weights sum to {v.sum()!r}, not 1")
            object.__setattr__(self, "v", _to_nested_tuple(v))
        ops = tuple((int(layer), op) for layer, op in self.post_ops)
        for layer, op in ops:
            if not 0 <= layer < self.depth:
                raise ValueError(f"post-op attached to layer {layer} outside depth {self.depth}")
            if not isinstance(op, LinearPostOp):
                raise TypeError("post_ops entries must be (layer, LinearPostOp)")
        object.__setattr__(self, "post_ops", ops)

    def filter_weights(self, rank: int) -> np.ndarray:
        """Filter variance weights over the ``[-k, k]^rank`` hypercube, summing to 1."""
        width = 2 * self.filter_half_width + 1
        if self.v is None:
            return np.full((width,) * rank, 1.0 / width ** rank)
        v = np.asarray(self.v, dtype=np.float64)
        if v.ndim == rank:
            return v
        if v.ndim == 1:
            out = v
            for _ in range(rank - 1):
                out = np.multiply.outer(out, v)
            return out
        raise ShapeError(f"filter weights of rank {v.ndim} for {rank}D inputs")

    def offsets(self, rank: int):
        """Filter offsets in ascending lexicographic order, paired with their weights."""
        k = self.filter_half_width
        w = self.filter_weights(rank)
        for beta in itertools.product(range(-k, k + 1), repeat=rank):
            yield beta, float(w[tuple(b + k for b in beta)])

    def ops_for_layer(self, layer: int) -> list:
        return [op for l, op in self.post_ops if l == layer]

    def readout_variances(self) -> tuple:
        r = self.readout
        w = self.sigma_w2 if r.sigma_w2 is None else r.sigma_w2
        b = self.sigma_b2 if r.sigma_b2 is None else r.sigma_b2
        return w, b

    def layer_shapes(self, spatial_shape: Sequence[int]) -> list:
        """Spatial shape after each layer, starting with the input shape."""
        shape = tuple(spatial_shape)
        shapes = [shape]
        k = self.filter_half_width
        for layer in range(self.depth):
            if self.padding == "valid":
                shape = tuple(s - 2 * k for s in shape)
                if min(shape) < 1:
                    raise SpatialCollapseError(
                        f"valid padding collapses {spatial_shape} below 1 pixel at layer {layer}")
            for op in self.ops_for_layer(layer):
                shape = tuple(op.output_size(s) for s in shape)
            shapes.append(shape)
        return shapes

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["post_ops"] = [[layer, dataclasses.asdict(op)] for layer, op in self.post_ops]
        d["v"] = None if self.v is None else np.asarray(self.v).tolist()
        if d["readout"]["h"] is not None:
            d["readout"]["h"] = list(d["readout"]["h"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        readout = d.pop("readout", None) or {}
        post_ops = d.pop("post_ops", None) or ()
        v = d.pop("v", None)
        return cls(
            **d,
            v=None if v is None else np.asarray(v, dtype=np.float64),
            post_ops=tuple((layer, LinearPostOp(**op)) for layer, op in post_ops),
            readout=ReadoutSpec(**readout) if isinstance(readout, dict) else readout,
        )

    def digest(self) -> int:
        """64-bit digest of the canonical JSON form of this config."""
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def _to_nested_tuple(a: np.ndarray):
    if a.ndim == 1:
        return tuple(float(x) for x in a)
    return tuple(_to_nested_tuple(row) for row in a)


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CovFull:
    """Four-index covariance ``K[x, x', a, a']`` over sample and pixel pairs."""

    values: np.ndarray
    spatial_shape: tuple
    layer: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        shape = tuple(int(s) for s in self.spatial_shape)
        if v.ndim != 2 + 2 * len(shape) or v.shape[0] != v.shape[1] \
                or v.shape[2:] != shape + shape:
            raise ShapeError(f"CovFull values {v.shape} inconsistent with spatial shape {shape}")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "spatial_shape", shape)

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_pixels(self) -> int:
        return int(np.prod(self.spatial_shape))

    def pixel_matrix_view(self) -> np.ndarray:
        """``(N, N, d, d)`` view with pixel tuples flattened."""
        n, d = self.n_samples, self.n_pixels
        return self.values.reshape(n, n, d, d)


@dataclass(frozen=True)
class CovDiag:
    """Pixel-diagonal covariance ``K[x, x', a] = [K]_{a, a}(x, x')``."""

    values: np.ndarray
    spatial_shape: tuple
    layer: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        shape = tuple(int(s) for s in self.spatial_shape)
        if v.ndim != 2 + len(shape) or v.shape[0] != v.shape[1] or v.shape[2:] != shape:
            raise ShapeError(f"CovDiag values {v.shape} inconsistent with spatial shape {shape}")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "spatial_shape", shape)

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_pixels(self) -> int:
        return int(np.prod(self.spatial_shape))

    def pixel_view(self) -> np.ndarray:
        n = self.n_samples
        return self.values.reshape(n, n, self.n_pixels)


@dataclass(frozen=True)
class ClassKernel:
    """Sample-by-sample kernel produced by a readout (square or cross block)."""

    matrix: np.ndarray
    readout: str = "vec"

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ShapeError(f"class kernel must be a matrix, got shape {m.shape}")
        object.__setattr__(self, "matrix", m)

    @property
    def shape(self) -> tuple:
        return self.matrix.shape


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def flatten_cov(K: CovFull) -> np.ndarray:
    """``(N d, N d)`` matrix with row index ``x * d + a`` (sample-major)."""
    n, d = K.n_samples, K.n_pixels
    return K.pixel_matrix_view().transpose(0, 2, 1, 3).reshape(n * d, n * d)


def unflatten_cov(M: np.ndarray, spatial_shape: Sequence[int], layer: int = 0) -> CovFull:
    """Inverse of :func:`flatten_cov`."""
    shape = tuple(spatial_shape)
    d = int(np.prod(shape))
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or M.shape[0] % d:
        raise ShapeError(f"cannot unflatten a {M.shape} matrix with {d} pixels")
    n = M.shape[0] // d
    values = M.reshape(n, d, n, d).transpose(0, 2, 1, 3).reshape((n, n) + shape + shape)
    return CovFull(np.ascontiguousarray(values), shape, layer)


def diag_of(K: CovFull) -> CovDiag:
    n, d = K.n_samples, K.n_pixels
    values = np.diagonal(K.pixel_matrix_view(), axis1=2, axis2=3)
    return CovDiag(np.ascontiguousarray(values).reshape((n, n) + K.spatial_shape),
                   K.spatial_shape, K.layer)


def expand_diag(Kd: CovDiag, fill: float = 0.0) -> CovFull:
    """Full tensor with the given pixel diagonal and constant off-diagonal entries."""
    n, d = Kd.n_samples, Kd.n_pixels
    full = np.full((n, n, d, d), fill, dtype=np.float64)
    idx = np.arange(d)
    full[:, :, idx, idx] = Kd.pixel_view()
    return CovFull(full.reshape((n, n) + Kd.spatial_shape * 2), Kd.spatial_shape, Kd.layer)


def _pixel_major(X: InputSet) -> np.ndarray:
    n, c, d = X.n_samples, X.channels, X.n_pixels
    return np.ascontiguousarray(X.samples.reshape(n, c, d).transpose(2, 0, 1))


def input_cov(X: InputSet) -> CovFull:
    """Uncentered input covariance ``(1/n0) sum_i x_{i,a} x'_{i,a'}``."""
    n, c, d = X.n_samples, X.channels, X.n_pixels
    xp = _pixel_major(X)
    # One (N, c) @ (c, N) product per pixel pair; the diagonal track reuses the
    # same products so both tracks agree bitwise.
    gram = np.empty((n, n, d, d))
    for a in range(d):
        for b in range(d):
            gram[:, :, a, b] = (xp[a] @ xp[b].T) / c
    return CovFull(gram.reshape((n, n) + X.spatial_shape * 2), X.spatial_shape, 0)


def input_cov_diag(X: InputSet) -> CovDiag:
    """Pixel-diagonal of :func:`input_cov` without forming the full tensor."""
    n, c, d = X.n_samples, X.channels, X.n_pixels
    xp = _pixel_major(X)
    gram = np.empty((n, n, d))
    for a in range(d):
        gram[:, :, a] = (xp[a] @ xp[a].T) / c
    return CovDiag(gram.reshape((n, n) + X.spatial_shape), X.spatial_shape, 0)


def min_eig_ratio(M: np.ndarray) -> float:
    """Smallest eigenvalue of a symmetric matrix divided by its trace."""
    M = np.asarray(M, dtype=np.float64)
    sym = 0.5 * (M + M.T)
    tr = np.trace(sym)
    lo = np.linalg.eigvalsh(sym)[0]
    return lo / tr if tr > 0 else lo


def is_psd(M: np.ndarray, rtol: float = 1e-8) -> bool:
    M = np.asarray(M, dtype=np.float64)
    lo = np.linalg.eigvalsh(0.5 * (M + M.T))[0]
    return lo >= -rtol * max(np.trace(M), 0.0)
