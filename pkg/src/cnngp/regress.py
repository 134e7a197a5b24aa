"""Exact GP posterior prediction with a class kernel."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from .data_model import ShapeError


class LadderExhaustedError(np.linalg.LinAlgError):
    """Every rung of the diagonal regularization ladder failed to factorize."""


def encode_labels(class_indices, num_classes: int) -> np.ndarray:
    """Zero-mean regression targets: ``(C-1)/C`` on the true class, ``-1/C`` elsewhere."""
    idx = np.asarray(class_indices, dtype=np.int64).ravel()
    if num_classes < 1 or np.any(idx < 0) or np.any(idx >= num_classes):
        raise ValueError(f"class indices must lie in [0, {num_classes})")
    T = np.full((idx.size, num_classes), -1.0 / num_classes)
    T[np.arange(idx.size), idx] = (num_classes - 1) / num_classes
    return T


@dataclass(frozen=True)
class RegressionProblem:
    K_train: np.ndarray
    K_cross: np.ndarray
    k_test_diag: np.ndarray
    targets: np.ndarray
    noise: float = 0.0

    def __post_init__(self):
        Ktr = np.asarray(self.K_train, dtype=np.float64)
        Kx = np.asarray(self.K_cross, dtype=np.float64)
        kd = np.asarray(self.k_test_diag, dtype=np.float64).ravel()
        T = np.asarray(self.targets, dtype=np.float64)
        if T.ndim == 1:
            T = T[:, None]
        n = Ktr.shape[0]
        if Ktr.shape != (n, n):
            raise ShapeError(f"training kernel must be square, got {Ktr.shape}")
        if Kx.ndim != 2 or Kx.shape[1] != n or kd.size != Kx.shape[0]:
            raise ShapeError(f"cross kernel {Kx.shape} / test diagonal {kd.shape} "
                             f"do not match {n} training points")
        if T.shape[0] != n:
            raise ShapeError(f"{T.shape[0]} target rows for {n} training points")
        if self.noise < 0:
            raise ValueError("noise variance must be >= 0")
        for name, val in (("K_train", Ktr), ("K_cross", Kx), ("k_test_diag", kd), ("targets", T)):
            object.__setattr__(self, name, val)

    @classmethod
    def from_kernel(cls, K: np.ndarray, train_idx, test_idx, targets, noise: float = 0.0):
        """Slice a joint kernel over train and test samples."""
        K = np.asarray(K, dtype=np.float64)
        tr, te = np.asarray(train_idx), np.asarray(test_idx)
        return cls(K[np.ix_(tr, tr)], K[np.ix_(te, tr)], np.diag(K)[te], targets, noise)


@dataclass(frozen=True)
class PosteriorResult:
    mean: np.ndarray
    variance: np.ndarray
    regularization: float = 0.0
    rung: Optional[int] = None
    failed_rungs: tuple = ()

    @property
    def predicted(self) -> np.ndarray:
        # argmax ties resolve to the lowest class index
        return np.argmax(self.mean, axis=1)


def posterior(problem: RegressionProblem, jitter: float = 0.0,
              noisy_variance: bool = True) -> PosteriorResult:
    """Posterior mean and variance from one Cholesky factorization.

    ``noise + jitter`` is added to the training diagonal. With
    ``noisy_variance`` the same term is added to the test self-kernel, giving
    the predictive variance of a noisy observation.

    Raises ``numpy.linalg.LinAlgError`` if the regularized kernel is not
    positive definite.
    """
    added = problem.noise + jitter
    n = problem.K_train.shape[0]
    A = problem.K_train + added * np.eye(n)
    factor = linalg.cho_factor(A, lower=True, check_finite=True)
    alpha = linalg.cho_solve(factor, problem.targets)
    mean = problem.K_cross @ alpha
    L = np.tril(factor[0])
    V = linalg.solve_triangular(L, problem.K_cross.T, lower=True)
    prior = problem.k_test_diag + (added if noisy_variance else 0.0)
    variance = prior - np.sum(V * V, axis=0)
    return PosteriorResult(mean, variance, added)


@dataclass(frozen=True)
class LadderSpec:
    """Regularization ``10**e`` for ``e = start, start+1, ..., stop``, optionally
    scaled by the mean of the training kernel diagonal."""

    start: int = -10
    stop: int = 5
    scale_by_diag_mean: bool = False

    def rungs(self, K_train: np.ndarray) -> list:
        scale = float(np.mean(np.diag(K_train))) if self.scale_by_diag_mean else 1.0
        return [(e, scale * 10.0 ** e) for e in range(self.start, self.stop + 1)]


def solve_with_ladder(problem: RegressionProblem, ladder: LadderSpec = LadderSpec(),
                      noisy_variance: bool = True) -> PosteriorResult:
    """Retry the posterior with a tenfold larger diagonal term until Cholesky succeeds."""
    failed = []
    for exponent, jitter in ladder.rungs(problem.K_train):
        try:
            res = posterior(problem, jitter, noisy_variance)
        except np.linalg.LinAlgError:
            failed.append(exponent)
            continue
        return PosteriorResult(res.mean, res.variance, res.regularization, exponent,
                               tuple(failed))
    raise LadderExhaustedError(
        f"Cholesky failed for every rung 1e{ladder.start} .. 1e{ladder.stop}"
        + (" (scaled by diagonal mean)" if ladder.scale_by_diag_mean else ""))


def accuracy(result, true_labels) -> float:
    """Fraction of test points whose argmax prediction equals the label."""
    mean = result.mean if isinstance(result, PosteriorResult) else np.asarray(result)
    labels = np.asarray(true_labels).ravel()
    if mean.shape[0] != labels.size:
        raise ShapeError(f"{mean.shape[0]} predictions for {labels.size} labels")
    if labels.size == 0:
        return float("nan")
    return float(np.mean(np.argmax(mean, axis=1) == labels))
