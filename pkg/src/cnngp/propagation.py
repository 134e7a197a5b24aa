"""Depth recursion of the kernel operators, readouts and the phase-diagram scan."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

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
from .kernel_ops import (
    affine,
    gaussian_expectation,
    lcn_mask,
    nonlinearity_map,
    post_op,
    self_variances,
)


class TrackError(ValueError):
    """A readout or post-op needs pixel-pixel covariances the diagonal track lacks."""


@dataclass
class PropagationTrace:
    cfg: ArchConfig
    track: str
    final: Union[CovFull, CovDiag]
    spatial_shapes: list
    pre_snapshots: list = field(default_factory=list)
    post_snapshots: list = field(default_factory=list)
    elapsed: float = 0.0
    peak_kernel_bytes: int = 0

    @property
    def depth(self) -> int:
        return self.cfg.depth


def required_track(cfg: ArchConfig, spatial_shape: Sequence[int]) -> str:
    shapes = cfg.layer_shapes(spatial_shape)
    d_top = int(np.prod(shapes[-1]))
    if cfg.readout.needs_full_track(d_top):
        return "full"
    if any(op.kind == "avg_pool" and op.window > 1 for _, op in cfg.post_ops):
        return "full"
    return "diag"


def _resolve_track(cfg: ArchConfig, spatial_shape, track: Optional[str]) -> str:
    needed = required_track(cfg, spatial_shape)
    if track is None:
        return needed
    if track not in ("full", "diag"):
        raise ValueError(f"unknown track {track!r}")
    if track == "diag" and needed == "full":
        raise TrackError(f"readout {cfg.readout.kind!r} with these post-ops needs the full track")
    return track


def _prepare_inputs(X: InputSet, cfg: ArchConfig) -> InputSet:
    if cfg.connectivity == "fcn" and X.n_pixels > 1:
        return X.as_fcn()
    return X


def _layer_pre(values: np.ndarray, cfg: ArchConfig, layer: int, rank: int, full: bool,
               n_lead: int = 2) -> np.ndarray:
    """Affine step plus connectivity mask and post-ops of one layer."""
    out = affine(values, cfg, rank, full, n_lead)
    if full and cfg.connectivity == "lcn":
        out = lcn_mask(out, rank, n_lead)
    for op in cfg.ops_for_layer(layer):
        out = post_op(out, op, rank, full, n_lead)
    return out


def propagate(X: InputSet, cfg: ArchConfig, track: Optional[str] = None,
              keep_snapshots: bool = False) -> PropagationTrace:
    """Run the depth recursion on the whole sample set.

    The final tensor is the activation covariance after ``cfg.depth`` layers.
    ``track`` defaults to the cheapest one the readout allows.
    """
    t0 = time.perf_counter()
    X = _prepare_inputs(X, cfg)
    track = _resolve_track(cfg, X.spatial_shape, track)
    full = track == "full"
    rank = X.spatial_rank
    shapes = cfg.layer_shapes(X.spatial_shape)

    K = input_cov(X) if full else input_cov_diag(X)
    values = K.values
    peak = values.nbytes
    pre_snaps, post_snaps = [], []
    if keep_snapshots:
        post_snaps.append(K)
    kind = CovFull if full else CovDiag
    for layer in range(cfg.depth):
        pre = _layer_pre(values, cfg, layer, rank, full)
        var = self_variances(pre, rank, full)
        values = nonlinearity_map(pre, var, var, cfg.nonlinearity, full)
        peak = max(peak, pre.nbytes + values.nbytes)
        if keep_snapshots:
            pre_snaps.append(kind(pre, shapes[layer + 1], layer))
            post_snaps.append(kind(values, shapes[layer + 1], layer + 1))
    final = kind(values, shapes[-1], cfg.depth)
    return PropagationTrace(cfg, track, final, shapes, pre_snaps, post_snaps,
                            time.perf_counter() - t0, peak)


# ---------------------------------------------------------------------------
# Readouts
# ---------------------------------------------------------------------------


def _readout_values(values: np.ndarray, spec: ReadoutSpec, full: bool, rank: int,
                    sigma_w2: float, sigma_b2: float) -> np.ndarray:
    na, nb = values.shape[:2]
    spatial = values.shape[2:2 + rank]
    d = int(np.prod(spatial))
    h = spec.projection(d)
    if full:
        flat = values.reshape(na, nb, d, d)
        diag = np.ascontiguousarray(np.einsum("xyaa->xya", flat))
    else:
        flat = None
        diag = values.reshape(na, nb, d)
    if h is None:
        return sigma_w2 / d * diag.sum(axis=-1) + sigma_b2
    nz = np.flatnonzero(h)
    if nz.size == 1:
        a = nz[0]
        return sigma_w2 * (h[a] * h[a] * diag[:, :, a]) + sigma_b2
    if not full:
        raise TrackError(f"{spec.kind} readout needs the full track")
    return sigma_w2 * ((flat @ h) @ h) + sigma_b2


def readout_kernel(K: Union[CovFull, CovDiag], spec: ReadoutSpec, sigma_w2: float,
                   sigma_b2: float) -> ClassKernel:
    """Collapse a top-layer pixel kernel into a sample-by-sample kernel."""
    full = isinstance(K, CovFull)
    out = _readout_values(K.values, spec, full, len(K.spatial_shape), sigma_w2, sigma_b2)
    return ClassKernel(out, spec.tag)


def readout(trace: PropagationTrace, spec: Optional[ReadoutSpec] = None) -> ClassKernel:
    """Readout with the trace's configured spec (or an override sharing its variances)."""
    spec = trace.cfg.readout if spec is None else spec
    sw, sb = trace.cfg.readout_variances()
    return readout_kernel(trace.final, spec, sw, sb)


def readout_vectorize(trace: PropagationTrace) -> ClassKernel:
    return readout(trace, ReadoutSpec("vectorize"))


def readout_pool(trace: PropagationTrace) -> ClassKernel:
    return readout(trace, ReadoutSpec("pool"))


def readout_subsample(trace: PropagationTrace, pixel_index: int) -> ClassKernel:
    return readout(trace, ReadoutSpec("subsample_pixel", pixel_index=pixel_index))


def readout_project(trace: PropagationTrace, h) -> ClassKernel:
    h = np.asarray(h, dtype=np.float64).ravel()
    if h.size != trace.final.n_pixels:
        raise ShapeError(f"projection of length {h.size} for {trace.final.n_pixels} pixels")
    return readout(trace, ReadoutSpec("projection", h=tuple(h)))


def lcn_pool_kernel(vec_kernel: ClassKernel, d: int, sigma_b2: float) -> ClassKernel:
    """LCN-with-pooling kernel obtained by rescaling the vectorized CNN kernel."""
    return ClassKernel((vec_kernel.matrix - sigma_b2) / d + sigma_b2, "lcn_pool")


# ---------------------------------------------------------------------------
# Tiled class-kernel computation
# ---------------------------------------------------------------------------


def _first_layer_block(xa: np.ndarray, xb: np.ndarray, full: bool) -> np.ndarray:
    """Input covariance between two sample blocks, shape ``(Na, Nb, *pix)``."""
    na, c = xa.shape[:2]
    nb = xb.shape[0]
    spatial = xa.shape[2:]
    d = int(np.prod(spatial))
    pa = xa.reshape(na, c, d).transpose(2, 0, 1)
    pb = xb.reshape(nb, c, d).transpose(2, 0, 1)
    if full:
        out = np.einsum("aic,bjc->ijab", pa, pb, optimize=True) / c
        return out.reshape((na, nb) + spatial * 2)
    out = np.matmul(pa, pb.transpose(0, 2, 1)) / c
    return np.ascontiguousarray(out.transpose(1, 2, 0)).reshape((na, nb) + spatial)


def _self_first_layer(x: np.ndarray, full: bool) -> np.ndarray:
    n, c = x.shape[:2]
    spatial = x.shape[2:]
    d = int(np.prod(spatial))
    flat = x.reshape(n, c, d)
    if full:
        return (np.einsum("nca,ncb->nab", flat, flat) / c).reshape((n,) + spatial * 2)
    return (np.einsum("nca,nca->na", flat, flat) / c).reshape((n,) + spatial)


def _self_track(x: np.ndarray, cfg: ArchConfig, rank: int, full: bool):
    """Per-layer pre-activation self-variances and the final self kernel of each sample."""
    S = _self_first_layer(x, full)
    variances = []
    for layer in range(cfg.depth):
        P = _layer_pre(S, cfg, layer, rank, full, n_lead=1)
        n = P.shape[0]
        spatial = P.shape[1:1 + rank]
        d = int(np.prod(spatial))
        if full:
            v = np.ascontiguousarray(np.einsum("naa->na", P.reshape(n, d, d))).reshape((n,) + spatial)
            kxx = v.reshape((n,) + spatial + (1,) * rank)
            kyy = v.reshape((n,) + (1,) * rank + spatial)
        else:
            v = P
            kxx = kyy = v
        variances.append(v)
        S = gaussian_expectation(P, kxx, kyy, cfg.nonlinearity)
    return variances, S


def _self_readout(S: np.ndarray, spec: ReadoutSpec, full: bool, rank: int,
                  sigma_w2: float, sigma_b2: float) -> np.ndarray:
    arr = S.reshape((S.shape[0], 1) + S.shape[1:])
    return _readout_values(arr, spec, full, rank, sigma_w2, sigma_b2)[:, 0]


def kernel_diagonal(X: InputSet, cfg: ArchConfig, track: Optional[str] = None) -> np.ndarray:
    """Class-kernel self values ``K(x, x)`` for every sample, without pair blocks."""
    X = _prepare_inputs(X, cfg)
    full = _resolve_track(cfg, X.spatial_shape, track) == "full"
    cfg.layer_shapes(X.spatial_shape)
    _, S = _self_track(X.samples, cfg, X.spatial_rank, full)
    sw, sb = cfg.readout_variances()
    return _self_readout(S, cfg.readout, full, X.spatial_rank, sw, sb)


def kernel_matrix(X: InputSet, cfg: ArchConfig, Y: Optional[InputSet] = None,
                  track: Optional[str] = None, block_size: int = 256,
                  threads: int = 1) -> ClassKernel:
    """Class kernel between ``X`` and ``Y`` (default ``X``), computed tile by tile.

    Memory per tile is ``block_size**2`` times the per-pair tensor size, so
    large sample sets never materialize the whole covariance tensor.
    """
    symmetric = Y is None
    X = _prepare_inputs(X, cfg)
    Y = X if symmetric else _prepare_inputs(Y, cfg)
    if X.samples.shape[1:] != Y.samples.shape[1:]:
        raise ShapeError("X and Y have different channel/spatial shapes")
    full = _resolve_track(cfg, X.spatial_shape, track) == "full"
    rank = X.spatial_rank
    cfg.layer_shapes(X.spatial_shape)
    sw, sb = cfg.readout_variances()

    var_x, _ = _self_track(X.samples, cfg, rank, full)
    var_y = var_x if symmetric else _self_track(Y.samples, cfg, rank, full)[0]

    nx, ny = X.n_samples, Y.n_samples
    out = np.empty((nx, ny))
    tiles = [(i, j) for i in range(0, nx, block_size) for j in range(0, ny, block_size)
             if not symmetric or j >= i]

    def run(tile):
        i, j = tile
        si, sj = slice(i, min(i + block_size, nx)), slice(j, min(j + block_size, ny))
        T = _first_layer_block(X.samples[si], Y.samples[sj], full)
        for layer in range(cfg.depth):
            P = _layer_pre(T, cfg, layer, rank, full)
            T = nonlinearity_map(P, var_x[layer][si], var_y[layer][sj], cfg.nonlinearity, full)
        out[si, sj] = _readout_values(T, cfg.readout, full, rank, sw, sb)
        if symmetric and j != i:
            out[sj, si] = out[si, sj].T

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(run, tiles))
    else:
        for tile in tiles:
            run(tile)
    if symmetric:
        out = 0.5 * (out + out.T)
    return ClassKernel(out, cfg.readout.tag)


# ---------------------------------------------------------------------------
# Large-depth fixed points
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhasePoint:
    sigma_w2: float
    sigma_b2: float
    depth: int
    q_star: float
    c_star: Optional[float]
    rate: float
    label: str


ORDERED_TOL = 1e-6
CRITICAL_RATE = 1e-3
_DELTA_FLOOR = 1e-13


def correlation_iterates(sigma_w2: float, sigma_b2: float, nonlinearity: str,
                         depth: int, c0: float = 0.5):
    """Pre-activation variance and correlation of two unit-norm inputs per layer.

    Returns ``(q, c)`` arrays of length ``depth + 1``; entry 0 is the input pair.
    Iteration stops early (arrays truncated) if the variance blows up.
    """
    kxx = 1.0
    kxy = c0
    qs, cs = [kxx], [c0]
    for _ in range(depth):
        post_xx = float(gaussian_expectation(kxx, kxx, kxx, nonlinearity))
        post_xy = float(gaussian_expectation(kxy, kxx, kxx, nonlinearity))
        kxx = sigma_b2 + sigma_w2 * post_xx
        kxy = sigma_b2 + sigma_w2 * post_xy
        if not np.isfinite(kxx) or kxx > 1e100:
            qs.append(np.inf)
            break
        qs.append(kxx)
        cs.append(min(max(kxy / kxx, -1.0), 1.0) if kxx > 0 else 1.0)
    return np.array(qs), np.array(cs)


def convergence_rate(c: np.ndarray, tail: float = 0.2) -> float:
    """Per-step log-rate of ``|c_l - c*|`` from successive differences over the tail."""
    deltas = np.abs(np.diff(c))
    idx = np.arange(deltas.size)
    start = int(np.floor(deltas.size * (1 - tail)))
    window = idx[start:][deltas[start:] > _DELTA_FLOOR]
    if window.size < 3:
        usable = idx[deltas > _DELTA_FLOOR]
        window = usable[-20:]
    if window.size == 0:
        return -np.inf
    if window.size == 1:
        return float(np.log(deltas[window[0]]) / max(window[0] + 1, 1))
    slope = np.polyfit(window.astype(float), np.log(deltas[window]), 1)[0]
    return float(slope)


def classify_phase(c_star: float, rate: float) -> str:
    if c_star >= 1 - ORDERED_TOL:
        return "ordered"
    if abs(rate) < CRITICAL_RATE:
        return "critical-band"
    return "chaotic"


def phase_point(sigma_w2: float, sigma_b2: float, nonlinearity: str, max_depth: int,
                c0: float = 0.5) -> PhasePoint:
    q, c = correlation_iterates(sigma_w2, sigma_b2, nonlinearity, max_depth, c0)
    if not np.isfinite(q[-1]):
        return PhasePoint(sigma_w2, sigma_b2, max_depth, float("inf"), None, float("nan"),
                          "divergent")
    rate = convergence_rate(c)
    c_star = float(c[-1])
    return PhasePoint(sigma_w2, sigma_b2, max_depth, float(q[-1]), c_star, rate,
                      classify_phase(c_star, rate))


def phase_scan(grid, nonlinearity: str, max_depth: int, c0: float = 0.5,
               threads: int = 1) -> list:
    """One :class:`PhasePoint` per ``(sigma_w2, sigma_b2)`` pair in ``grid``."""
    grid = [(float(w), float(b)) for w, b in grid]
    for w, b in grid:
        if not w > 0 or b < 0:
            raise ValueError(f"invalid grid point sigma_w2={w}, sigma_b2={b}")

    def one(p):
        return phase_point(p[0], p[1], nonlinearity, max_depth, c0)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, grid))
    return [one(p) for p in grid]


def uniform_grid(w_range=(0.1, 5.0), b_range=(0.0, 2.0), size=(50, 50)):
    """Endpoint-inclusive ``(sigma_w2, sigma_b2)`` grid, weight-major."""
    ws = np.linspace(w_range[0], w_range[1], size[0])
    bs = np.linspace(b_range[0], b_range[1], size[1])
    return [(w, b) for w in ws for b in bs]
