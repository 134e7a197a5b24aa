"""Kernel propagation operators.

The affine step of a convolution layer maps a covariance tensor ``K`` to
``sigma_b2 + sigma_w2 * sum_beta v_beta K[a + beta, a' + beta]``; the
nonlinearity step replaces every entry by the bivariate Gaussian expectation
``E[phi(u) phi(u')]`` under the 2x2 covariance formed from that entry and the
two matching self-variances.

Every operator here works on raw arrays whose trailing axes are pixel axes, so
the same code serves whole tensors, pixel-diagonal tensors and rectangular
tiles of sample pairs. Sums over filter offsets always run in ascending
lexicographic order, which makes the full and diagonal tracks agree bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .data_model import (
    ArchConfig,
    CovDiag,
    CovFull,
    LinearPostOp,
    ShapeError,
    SpatialCollapseError,
)

NEG_TOL = 1e-12


# ---------------------------------------------------------------------------
# Pixel-axis plumbing
# ---------------------------------------------------------------------------


def pixel_groups(n_lead: int, rank: int, full: bool) -> list:
    """Axes belonging to each spatial dimension for an array with ``n_lead`` sample axes."""
    if full:
        return [(n_lead + i, n_lead + rank + i) for i in range(rank)]
    return [(n_lead + i,) for i in range(rank)]


def shift_axis(arr: np.ndarray, axis: int, offset: int, padding: str, k: int) -> np.ndarray:
    """Read ``arr[..., j + offset, ...]`` along ``axis`` under a padding rule.

    circular wraps indices, same reads zeros outside the image, valid keeps the
    ``d - 2k`` output positions whose whole window is inside the image.
    """
    d = arr.shape[axis]
    if padding == "circular":
        return np.roll(arr, -offset, axis=axis)
    if padding == "valid":
        n_out = d - 2 * k
        if n_out < 1:
            raise SpatialCollapseError(f"valid padding with k={k} on {d} pixels")
        idx = [slice(None)] * arr.ndim
        idx[axis] = slice(k + offset, k + offset + n_out)
        return arr[tuple(idx)]
    out = np.zeros_like(arr)
    src = [slice(None)] * arr.ndim
    dst = [slice(None)] * arr.ndim
    if offset >= 0:
        src[axis], dst[axis] = slice(offset, d), slice(0, d - offset)
    else:
        src[axis], dst[axis] = slice(0, d + offset), slice(-offset, d)
    out[tuple(dst)] = arr[tuple(src)]
    return out


def _shifted(arr: np.ndarray, groups: list, beta: Sequence[int], padding: str, k: int):
    out = arr
    for axes, b in zip(groups, beta):
        for ax in axes:
            out = shift_axis(out, ax, b, padding, k)
    return out


def affine(values: np.ndarray, cfg: ArchConfig, rank: int, full: bool,
           n_lead: int = 2) -> np.ndarray:
    """Affine cross-correlation step on a raw kernel array."""
    groups = pixel_groups(n_lead, rank, full)
    acc = None
    for beta, w in cfg.offsets(rank):
        term = w * _shifted(values, groups, beta, cfg.padding, cfg.filter_half_width)
        acc = term if acc is None else acc + term
    return cfg.sigma_b2 + cfg.sigma_w2 * acc


def lcn_mask(values: np.ndarray, rank: int, n_lead: int = 2) -> np.ndarray:
    """Zero every ``a != a'`` entry of a full kernel array."""
    spatial = values.shape[n_lead:n_lead + rank]
    d = int(np.prod(spatial))
    eye = np.eye(d).reshape(spatial + spatial)
    return values * eye


def post_op(values: np.ndarray, op: LinearPostOp, rank: int, full: bool,
            n_lead: int = 2) -> np.ndarray:
    """Congruence ``B K B^T`` on every pixel axis pair (selection on diagonal arrays)."""
    for axes in pixel_groups(n_lead, rank, full):
        d = values.shape[axes[0]]
        if full:
            B = op.matrix(d)
            for ax in axes:
                values = np.moveaxis(np.tensordot(B, values, axes=([1], [ax])), 0, ax)
        else:
            sel = op.selection(d)
            if sel is None:
                raise ShapeError("averaging post-ops need the full pixel-pixel covariance")
            values = np.take(values, sel, axis=axes[0])
    return values


# ---------------------------------------------------------------------------
# Nonlinearity map
# ---------------------------------------------------------------------------


def gaussian_expectation(kxy, kxx, kyy, nonlinearity: str) -> np.ndarray:
    """``E[phi(u) phi(v)]`` for ``(u, v) ~ N(0, [[kxx, kxy], [kxy, kyy]])``.

    Arguments broadcast. Correlations are clamped to [-1, 1]; a zero variance
    on either side yields 0 since both nonlinearities vanish at 0.
    """
    kxy = np.asarray(kxy, dtype=np.float64)
    kxx = np.asarray(kxx, dtype=np.float64)
    kyy = np.asarray(kyy, dtype=np.float64)
    if min(np.min(kxx), np.min(kyy)) < -NEG_TOL:
        raise ValueError("negative variance passed to the nonlinearity map; "
                         "the upstream kernel is not PSD")
    kxx = np.maximum(kxx, 0.0)
    kyy = np.maximum(kyy, 0.0)
    degenerate = (kxx == 0.0) | (kyy == 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        if nonlinearity == "relu":
            s = np.sqrt(kxx * kyy)
            c = np.clip(kxy / s, -1.0, 1.0)
            theta = np.arccos(c)
            out = s / (2 * np.pi) * (np.sqrt(1.0 - c * c) + (np.pi - theta) * c)
        elif nonlinearity == "erf":
            c = np.clip(2.0 * kxy / np.sqrt((1.0 + 2.0 * kxx) * (1.0 + 2.0 * kyy)), -1.0, 1.0)
            out = (2.0 / np.pi) * np.arcsin(c)
        else:
            raise ValueError(f"unknown nonlinearity {nonlinearity!r}")
    return np.where(degenerate, 0.0, out)


def self_variances(values: np.ndarray, rank: int, full: bool) -> np.ndarray:
    """``[K]_{a,a}(x, x)`` as an ``(N, *spatial)`` array from a square kernel array."""
    n = values.shape[0]
    spatial = values.shape[2:2 + rank]
    d = int(np.prod(spatial))
    if full:
        flat = values.reshape(n, n, d, d)
        var = np.einsum("xxaa->xa", flat)
    else:
        var = np.einsum("xxa->xa", values.reshape(n, n, d))
    return np.ascontiguousarray(var).reshape((n,) + spatial)


def nonlinearity_map(values: np.ndarray, var_a: np.ndarray, var_b: np.ndarray,
                     nonlinearity: str, full: bool) -> np.ndarray:
    """Apply the nonlinearity map to a (possibly rectangular) block of kernel entries.

    ``values`` has shape ``(Na, Nb, *pix)``; ``var_a`` and ``var_b`` are the
    ``(Na, *spatial)`` / ``(Nb, *spatial)`` self-variances of the two sample sets.
    """
    rank = var_a.ndim - 1
    if full:
        kxx = var_a.reshape(var_a.shape[:1] + (1,) + var_a.shape[1:] + (1,) * rank)
        kyy = var_b.reshape((1,) + var_b.shape[:1] + (1,) * rank + var_b.shape[1:])
    else:
        kxx = var_a[:, None]
        kyy = var_b[None, :]
    return gaussian_expectation(values, kxx, kyy, nonlinearity)


# ---------------------------------------------------------------------------
# Typed entry points
# ---------------------------------------------------------------------------


def apply_A(K: CovFull, cfg: ArchConfig) -> CovFull:
    """Affine step of one convolution layer on a full covariance tensor."""
    rank = len(K.spatial_shape)
    out = affine(K.values, cfg, rank, full=True)
    return CovFull(out, out.shape[2:2 + rank], K.layer)


def apply_A_lcn(K: CovFull, cfg: ArchConfig) -> CovFull:
    """Locally connected variant: the affine step with pixel cross terms zeroed."""
    A = apply_A(K, cfg)
    return CovFull(lcn_mask(A.values, len(A.spatial_shape)), A.spatial_shape, K.layer)


def apply_A_diag(Kd: CovDiag, cfg: ArchConfig) -> CovDiag:
    """Affine step restricted to ``a == a'``; closes on the pixel diagonal."""
    rank = len(Kd.spatial_shape)
    out = affine(Kd.values, cfg, rank, full=False)
    return CovDiag(out, out.shape[2:], Kd.layer)


def apply_C(K: Union[CovFull, CovDiag], nonlinearity: str):
    full = isinstance(K, CovFull)
    rank = len(K.spatial_shape)
    var = self_variances(K.values, rank, full)
    out = nonlinearity_map(K.values, var, var, nonlinearity, full)
    return type(K)(out, K.spatial_shape, K.layer)


def apply_B(K: Union[CovFull, CovDiag], op: LinearPostOp):
    full = isinstance(K, CovFull)
    rank = len(K.spatial_shape)
    out = post_op(K.values, op, rank, full)
    return type(K)(out, out.shape[2:2 + rank], K.layer)


# ---------------------------------------------------------------------------
# Single-input variance fixed point
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FixedPoint:
    q_star: float
    iterations: int
    diverged: bool

    @property
    def converged(self) -> bool:
        return not self.diverged


def variance_map(q, sigma_w2: float, sigma_b2: float, nonlinearity: str):
    """One layer of the pre-activation variance recursion."""
    return sigma_b2 + sigma_w2 * gaussian_expectation(q, q, q, nonlinearity)


def moment_fixed_point_q(sigma_w2: float, sigma_b2: float, nonlinearity: str,
                         q0: float = 1.0, damping: float = 0.5, tol: float = 1e-10,
                         max_iter: int = 10_000) -> FixedPoint:
    """Solve ``q = sigma_b2 + sigma_w2 E[phi(u)^2], u ~ N(0, q)`` by damped iteration."""
    if not sigma_w2 > 0:
        raise ValueError("sigma_w2 must be > 0")
    q = float(q0)
    for it in range(1, max_iter + 1):
        f = float(variance_map(q, sigma_w2, sigma_b2, nonlinearity))
        if not np.isfinite(f) or f > 1e100:
            return FixedPoint(f, it, True)
        if abs(f - q) < tol:
            return FixedPoint(q if abs(q - f) == 0 else f, it, False)
        q = (1 - damping) * q + damping * f
    return FixedPoint(q, max_iter, True)


def sigma_b2_for_q_star(sigma_w2: float, q_star: float, nonlinearity: str) -> float:
    """Bias variance that places the variance fixed point exactly at ``q_star``."""
    b = q_star - sigma_w2 * float(gaussian_expectation(q_star, q_star, q_star, nonlinearity))
    if b < 0:
        raise ValueError(f"no nonnegative bias variance reaches q*={q_star} "
                         f"with sigma_w2={sigma_w2}")
    return b
