"""Monte Carlo estimates of NN-GP kernels from random finite-width networks.

Each of the ``M`` draws gets its own counter-based (Philox) stream spawned from
the run seed, so a draw's weights depend only on ``(seed, draw index)``. Per-draw
covariances are merged with a fixed binary-tree (pairwise) reduction whose shape
depends only on ``M``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.special import erf

from .data_model import (
    ArchConfig,
    ClassKernel,
    CovDiag,
    CovFull,
    InputSet,
    ReadoutSpec,
    ShapeError,
    input_cov,
    input_cov_diag,
)
from .kernel_ops import shift_axis
from .propagation import TrackError, _prepare_inputs, _resolve_track, readout_kernel


@dataclass(frozen=True)
class LayerParams:
    """Weights ``(n_out, n_in, *filter[, *out_pixels])`` and biases ``(n_out,)`` of one layer."""

    weights: np.ndarray
    bias: np.ndarray


@dataclass(frozen=True)
class McKernelEstimate:
    kernel: Union[CovFull, CovDiag]
    n: int
    M: int
    layer: int
    seed: Optional[int]

    @property
    def effective_samples(self) -> int:
        return self.n * self.M


def draw_stream(seed: int, draw: int) -> np.random.Generator:
    """Independent generator for draw ``draw`` of the run seeded with ``seed``."""
    ss = np.random.SeedSequence(seed, spawn_key=(draw,))
    return np.random.Generator(np.random.Philox(ss))


def _nonlinearity(name: str):
    if name == "relu":
        return lambda z: np.maximum(z, 0.0)
    if name == "erf":
        return erf
    raise ValueError(f"unknown nonlinearity {name!r}")


def draw_params(cfg: ArchConfig, in_channels: int, spatial_shape, n: int,
                rng: np.random.Generator) -> list:
    """Sample every layer's weights and biases from the Gaussian prior."""
    if n < 1:
        raise ValueError("width n must be >= 1")
    rank = len(spatial_shape)
    v = cfg.filter_weights(rank)
    shapes = cfg.layer_shapes(spatial_shape)
    params = []
    n_in = in_channels
    for layer in range(cfg.depth):
        std = np.sqrt(v * cfg.sigma_w2 / n_in)
        if cfg.connectivity == "lcn":
            out_pix = _conv_out_shape(shapes[layer], cfg)
            w = rng.standard_normal((n, n_in) + v.shape + out_pix)
            w *= std.reshape(std.shape + (1,) * rank)
        else:
            w = rng.standard_normal((n, n_in) + v.shape) * std
        b = rng.standard_normal(n) * np.sqrt(cfg.sigma_b2)
        params.append(LayerParams(w, b))
        n_in = n
    return params


def _conv_out_shape(shape, cfg: ArchConfig) -> tuple:
    if cfg.padding == "valid":
        return tuple(s - 2 * cfg.filter_half_width for s in shape)
    return tuple(shape)


def forward(X: InputSet, cfg: ArchConfig, params: list) -> list:
    """Activations ``y^0 .. y^depth`` of one network for every sample.

    All samples share the same parameters; arrays are ``(N, channels, *spatial)``.
    """
    X = _prepare_inputs(X, cfg)
    rank = X.spatial_rank
    k = cfg.filter_half_width
    phi = _nonlinearity(cfg.nonlinearity)
    y = X.samples
    acts = [y]
    for layer, p in enumerate(params):
        z = None
        for beta, _ in cfg.offsets(rank):
            ys = y
            for i, b in enumerate(beta):
                ys = shift_axis(ys, 2 + i, b, cfg.padding, k)
            idx = tuple(b + k for b in beta)
            w = p.weights[(slice(None), slice(None)) + idx]
            n_s, n_in = ys.shape[:2]
            spatial = ys.shape[2:]
            flat = ys.reshape(n_s, n_in, -1)
            if cfg.connectivity == "lcn":
                term = np.einsum("ijp,xjp->xip", w.reshape(w.shape[0], n_in, -1), flat)
            else:
                term = np.matmul(w, flat)
            term = term.reshape((n_s, -1) + spatial)
            z = term if z is None else z + term
        z = z + p.bias.reshape((1, -1) + (1,) * rank)
        for op in cfg.ops_for_layer(layer):
            for ax in range(2, 2 + rank):
                B = op.matrix(z.shape[ax])
                z = np.moveaxis(np.tensordot(B, z, axes=([1], [ax])), 0, ax)
        y = phi(z)
        acts.append(y)
    return acts


def forward_sample(X: InputSet, cfg: ArchConfig, n: int, rng: np.random.Generator) -> list:
    """Draw one random network of width ``n`` and return its activations."""
    Xp = _prepare_inputs(X, cfg)
    params = draw_params(cfg, Xp.channels, Xp.spatial_shape, n, rng)
    return forward(Xp, cfg, params)


def empirical_cov(y: np.ndarray, full: bool) -> np.ndarray:
    """``(1/n) sum_c y[x, c, a] y[x', c, a']`` as a kernel array."""
    n_s, c = y.shape[:2]
    spatial = y.shape[2:]
    d = int(np.prod(spatial))
    per_pixel = np.ascontiguousarray(y.reshape(n_s, c, d).transpose(2, 0, 1))
    if full:
        flat = per_pixel.transpose(1, 0, 2).reshape(n_s * d, c)
        g = (flat @ flat.T) / c
        g = g.reshape(n_s, d, n_s, d).transpose(0, 2, 1, 3)
        return np.ascontiguousarray(g).reshape((n_s, n_s) + spatial * 2)
    g = np.matmul(per_pixel, per_pixel.transpose(0, 2, 1)) / c
    return np.ascontiguousarray(g.transpose(1, 2, 0)).reshape((n_s, n_s) + spatial)


class _PairwiseSum:
    """Streaming pairwise summation with a tree fixed by the number of terms."""

    def __init__(self):
        self._stack = []  # (level, partial sum)

    def add(self, value: np.ndarray):
        level = 0
        while self._stack and self._stack[-1][0] == level:
            _, prev = self._stack.pop()
            value = prev + value
            level += 1
        self._stack.append((level, value))

    def total(self) -> np.ndarray:
        out = None
        for _, part in reversed(self._stack):
            out = part if out is None else part + out
        return out


def mc_estimate(X: InputSet, cfg: ArchConfig, n: int, M: int, seed: int,
                track: Optional[str] = None, threads: int = 1) -> McKernelEstimate:
    """Average of the top-layer activation covariance over ``M`` random networks."""
    if n < 1 or M < 1:
        raise ValueError("n and M must be >= 1")
    X = _prepare_inputs(X, cfg)
    full = _resolve_track(cfg, X.spatial_shape, track) == "full"
    shapes = cfg.layer_shapes(X.spatial_shape)
    kind = CovFull if full else CovDiag
    if cfg.depth == 0:
        K0 = input_cov(X) if full else input_cov_diag(X)
        return McKernelEstimate(K0, n, M, 0, seed)

    def one(m: int) -> np.ndarray:
        acts = forward_sample(X, cfg, n, draw_stream(seed, m))
        return empirical_cov(acts[-1], full)

    acc = _PairwiseSum()
    chunk = max(1, threads)
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for start in range(0, M, chunk):
            ms = range(start, min(start + chunk, M))
            results = pool.map(one, ms) if pool else map(one, ms)
            for r in results:
                acc.add(r)
    finally:
        if pool:
            pool.shutdown()
    values = acc.total() / M
    return McKernelEstimate(kind(values, shapes[-1], cfg.depth), n, M, cfg.depth, seed)


def mc_readout(estimate: McKernelEstimate, cfg: ArchConfig,
               spec: Optional[ReadoutSpec] = None) -> ClassKernel:
    """Apply a readout to an estimated top-layer kernel."""
    spec = cfg.readout if spec is None else spec
    K = estimate.kernel
    if isinstance(K, CovDiag) and spec.needs_full_track(K.n_pixels):
        raise TrackError(f"{spec.kind} readout needs a full-track estimate")
    sw, sb = cfg.readout_variances()
    return readout_kernel(K, spec, sw, sb)


def _as_array(K) -> np.ndarray:
    if isinstance(K, ClassKernel):
        return K.matrix
    if isinstance(K, (CovFull, CovDiag)):
        return K.values
    return np.asarray(K, dtype=np.float64)


def kernel_distance(K_est, K_ref) -> float:
    """``||K_ref - K_est||_F^2 / ||K_ref||_F^2``."""
    a, b = _as_array(K_est), _as_array(K_ref)
    if a.shape != b.shape:
        raise ShapeError(f"kernel shapes differ: {a.shape} vs {b.shape}")
    ref = float(np.sum(b * b))
    if ref == 0.0:
        raise ValueError("reference kernel has zero Frobenius norm")
    diff = a - b
    return float(np.sum(diff * diff)) / ref
