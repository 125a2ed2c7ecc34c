"""Zero-mean Gaussian-process regression with a squared-exponential ARD kernel.

Fitting goes through a Cholesky factorization of K + noise*I with a small
escalating jitter; prediction, the log marginal likelihood, and its
gradient with respect to log-hyperparameters all reuse that factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

__all__ = [
    "Hyperparameters",
    "TrainingSet",
    "FittedGP",
    "CholeskyFailure",
    "kernel_eval",
    "kernel_matrix",
    "fit",
    "log_marginal_likelihood",
    "lml_gradient",
]

_LOG_2PI = math.log(2.0 * math.pi)

# Jitter escalation: start at 1e-10 * signal variance, multiply by 10 until
# 1e-4 * signal variance, then give up loudly.
_JITTER_START = 1e-10
_JITTER_MAX = 1e-4


class CholeskyFailure(RuntimeError):
    """K + noise*I is numerically indefinite even after jitter escalation.

    Usually a symptom of nearly duplicated training points; callers are
    expected to surface this rather than swallow it.
    """


@dataclass(frozen=True)
class Hyperparameters:
    """Kernel signal variance, per-dimension lengthscales, and noise variance."""

    signal_variance: float
    lengthscales: np.ndarray
    noise_variance: float = 0.0

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ls)
        if not (self.signal_variance > 0.0 and np.isfinite(self.signal_variance)):
            raise ValueError("signal_variance must be positive and finite")
        if not (np.all(ls > 0.0) and np.all(np.isfinite(ls))):
            raise ValueError("lengthscales must be positive and finite")
        if not (self.noise_variance >= 0.0 and np.isfinite(self.noise_variance)):
            raise ValueError("noise_variance must be non-negative and finite")

    @property
    def dim(self) -> int:
        return self.lengthscales.size

    def to_log_vector(self) -> np.ndarray:
        """Pack as [log signal_variance, log lengthscales..., log noise_variance]."""
        return np.log(np.concatenate((
            [self.signal_variance], self.lengthscales,
            [max(self.noise_variance, 1e-300)],
        )))

    @classmethod
    def from_log_vector(cls, v: np.ndarray) -> "Hyperparameters":
        v = np.asarray(v, dtype=float)
        return cls(signal_variance=float(np.exp(v[0])),
                   lengthscales=np.exp(v[1:-1]),
                   noise_variance=float(np.exp(v[-1])))


@dataclass(frozen=True)
class TrainingSet:
    """Input points, observed unnormalized log-likelihood values, upper bound."""

    X: np.ndarray
    f: np.ndarray
    upper_bound: float = math.inf

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        f = np.atleast_1d(np.asarray(self.f, dtype=float))
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "f", f)
        if X.shape[0] != f.shape[0]:
            raise ValueError("X and f must have the same number of rows")
        if X.shape[0] < 1:
            raise ValueError("training set must contain at least one point")
        if not np.all(np.isfinite(X)):
            raise ValueError("training inputs must be finite")
        if not np.all(np.isfinite(f)):
            raise ValueError("training values must be finite")
        if np.unique(X, axis=0).shape[0] != X.shape[0]:
            raise ValueError("training inputs contain duplicated rows")

    @property
    def size(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def extended(self, X_new: np.ndarray, f_new: np.ndarray,
                 upper_bound: float | None = None) -> "TrainingSet":
        """New training set with rows appended (existing rows unchanged)."""
        X_new = np.atleast_2d(np.asarray(X_new, dtype=float))
        f_new = np.atleast_1d(np.asarray(f_new, dtype=float))
        return TrainingSet(
            np.vstack((self.X, X_new)),
            np.concatenate((self.f, f_new)),
            self.upper_bound if upper_bound is None else upper_bound,
        )


def kernel_eval(x: np.ndarray, x_other: np.ndarray,
                hyper: Hyperparameters) -> float:
    """Squared-exponential kernel value between two points."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x_other = np.atleast_1d(np.asarray(x_other, dtype=float))
    if x.shape != x_other.shape or x.size != hyper.dim:
        raise ValueError("point dimensions do not match the lengthscales")
    z = (x - x_other) / hyper.lengthscales
    return float(hyper.signal_variance * np.exp(-0.5 * np.dot(z, z)))


def kernel_matrix(hyper: Hyperparameters, A: np.ndarray,
                  B: np.ndarray | None = None) -> np.ndarray:
    """Kernel matrix k(A, B); the A == B case is exactly symmetric."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[1] != hyper.dim:
        raise ValueError("point dimensions do not match the lengthscales")
    As = A / hyper.lengthscales
    if B is None:
        sq = np.sum(As * As, axis=1)
        d2 = sq[:, None] + sq[None, :] - 2.0 * (As @ As.T)
        d2 = np.maximum(d2, 0.0)
        d2 = 0.5 * (d2 + d2.T)
        np.fill_diagonal(d2, 0.0)
        return hyper.signal_variance * np.exp(-0.5 * d2)
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if B.shape[1] != hyper.dim:
        raise ValueError("point dimensions do not match the lengthscales")
    Bs = B / hyper.lengthscales
    d2 = (np.sum(As * As, axis=1)[:, None] + np.sum(Bs * Bs, axis=1)[None, :]
          - 2.0 * (As @ Bs.T))
    d2 = np.maximum(d2, 0.0)
    return hyper.signal_variance * np.exp(-0.5 * d2)


@dataclass(frozen=True)
class FittedGP:
    """Immutable fitted GP: Cholesky factor of K + noise*I and weights alpha."""

    train: TrainingSet
    hyper: Hyperparameters
    L: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    jitter: float = 0.0

    def predict(self, X_star: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Predictive mean and variance at one point or a batch of points.

        Returns (mean, variance) as scalars for a single point and as
        1-D arrays for a (n, dim) batch.  The variance is clamped at 0.
        """
        X_star = np.asarray(X_star, dtype=float)
        single = X_star.ndim == 1
        Xs = np.atleast_2d(X_star)
        if Xs.shape[1] != self.train.dim:
            raise ValueError("prediction points have the wrong dimension")
        k_cross = kernel_matrix(self.hyper, self.train.X, Xs)
        mean = k_cross.T @ self.alpha
        v = solve_triangular(self.L, k_cross, lower=True)
        var = self.hyper.signal_variance - np.sum(v * v, axis=0)
        var = np.maximum(var, 0.0)
        if single:
            return float(mean[0]), float(var[0])
        return mean, var

    def log_marginal_likelihood(self) -> float:
        n = self.train.size
        return float(-0.5 * self.train.f @ self.alpha
                     - np.sum(np.log(np.diag(self.L)))
                     - 0.5 * n * _LOG_2PI)


def fit(train: TrainingSet, hyper: Hyperparameters) -> FittedGP:
    """Fit the GP by Cholesky factorization, escalating jitter on failure."""
    if train.dim != hyper.dim:
        raise ValueError("training set and lengthscales disagree on dimension")
    K = kernel_matrix(hyper, train.X)
    K[np.diag_indices_from(K)] += hyper.noise_variance
    jitter = 0.0
    while True:
        try:
            L = np.linalg.cholesky(K + jitter * np.eye(train.size)
                                   if jitter else K)
            break
        except np.linalg.LinAlgError:
            if jitter == 0.0:
                jitter = _JITTER_START * hyper.signal_variance
            else:
                jitter *= 10.0
            if jitter > _JITTER_MAX * hyper.signal_variance:
                raise CholeskyFailure(
                    f"covariance factorization failed for N={train.size} "
                    f"even with jitter {jitter:.1e} "
                    "(nearly duplicated training points?)") from None
    alpha = cho_solve((L, True), train.f)
    return FittedGP(train=train, hyper=hyper, L=L, alpha=alpha, jitter=jitter)


def log_marginal_likelihood(train: TrainingSet,
                            hyper: Hyperparameters) -> float:
    """Log marginal likelihood of the data under the zero-mean GP."""
    return fit(train, hyper).log_marginal_likelihood()


def lml_gradient(train: TrainingSet, hyper: Hyperparameters,
                 gp: FittedGP | None = None) -> np.ndarray:
    """Gradient of the log marginal likelihood over log-hyperparameters.

    Order matches Hyperparameters.to_log_vector: [log signal_variance,
    log lengthscales..., log noise_variance].
    """
    if gp is None:
        gp = fit(train, hyper)
    n = train.size
    K_signal = kernel_matrix(hyper, train.X)
    K_inv = cho_solve((gp.L, True), np.eye(n))
    W = np.outer(gp.alpha, gp.alpha) - K_inv
    grad = np.empty(hyper.dim + 2)
    # d K / d log(signal_variance) is the noise-free kernel matrix itself
    grad[0] = 0.5 * np.sum(W * K_signal)
    for i in range(hyper.dim):
        diff = train.X[:, i][:, None] - train.X[:, i][None, :]
        dK = K_signal * (diff * diff) / hyper.lengthscales[i] ** 2
        grad[1 + i] = 0.5 * np.sum(W * dK)
    grad[-1] = 0.5 * hyper.noise_variance * np.trace(W)
    return grad
