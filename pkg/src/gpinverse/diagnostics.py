"""Density diagnostics for particle ensembles.

Marginal kernel density estimates with a closed-form Cauchy-Schwarz
divergence between them (the adaptive loop's convergence measure), and
Gaussian moment matching with the analytic KL divergence (the accuracy
measure on problems with a known posterior).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .smc import ParticleEnsemble, systematic_resample

__all__ = [
    "DegenerateSamples",
    "GaussianMixture1D",
    "GaussianMoments",
    "kde_1d",
    "cs_divergence",
    "max_marginal_cs",
    "gaussian_kl",
    "moments_from_ensemble",
]

# fixed stream for the deterministic KDE subsetting / equal-weight resampling
_KDE_SEED = 20170


class DegenerateSamples(ValueError):
    """Sample set cannot support a kernel density estimate."""


@dataclass(frozen=True)
class GaussianMixture1D:
    """Equal-weight Gaussian mixture with one component per sample."""

    means: np.ndarray
    bandwidth: float

    def __post_init__(self):
        means = np.atleast_1d(np.asarray(self.means, dtype=float))
        object.__setattr__(self, "means", means)
        if means.size < 1:
            raise ValueError("mixture needs at least one component")
        if not self.bandwidth > 0.0:
            raise ValueError("bandwidth must be positive")

    def pdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        z = (x[..., None] - self.means) / self.bandwidth
        kernel = np.exp(-0.5 * z * z) / (self.bandwidth * math.sqrt(2 * math.pi))
        return np.mean(kernel, axis=-1)


def kde_1d(samples: np.ndarray, max_samples: int = 5000,
           seed: int = _KDE_SEED) -> GaussianMixture1D:
    """Gaussian KDE of 1-D samples with Silverman's bandwidth.

    When there are more than `max_samples` samples, a deterministic seeded
    shuffle selects the retained subset.
    """
    samples = np.atleast_1d(np.asarray(samples, dtype=float)).ravel()
    if np.unique(samples).size < 2:
        raise DegenerateSamples("need at least two distinct samples")
    if samples.size > max_samples:
        rng = np.random.default_rng(seed)
        samples = samples[rng.permutation(samples.size)[:max_samples]]
        if np.unique(samples).size < 2:
            raise DegenerateSamples("retained subset has no spread")
    sigma = float(np.std(samples, ddof=1))
    if sigma == 0.0:
        raise DegenerateSamples("zero sample standard deviation")
    h = 1.06 * sigma * samples.size ** (-0.2)
    return GaussianMixture1D(means=samples, bandwidth=h)


def _log_mean_overlap(p: GaussianMixture1D, q: GaussianMixture1D) -> float:
    """log of the mean pairwise Gaussian overlap integral between mixtures."""
    var = p.bandwidth ** 2 + q.bandwidth ** 2
    diff = p.means[:, None] - q.means[None, :]
    log_terms = -0.5 * diff * diff / var
    m = float(np.max(log_terms))
    total = m + math.log(float(np.sum(np.exp(log_terms - m))))
    return (total - math.log(p.means.size) - math.log(q.means.size)
            - 0.5 * math.log(2.0 * math.pi * var))


def cs_divergence(p: GaussianMixture1D, q: GaussianMixture1D) -> float:
    """Cauchy-Schwarz divergence between two 1-D Gaussian mixtures.

    All three integrals have closed forms as sums of Gaussian overlap
    terms.  The cross term is symmetrized so the function is exactly
    symmetric under argument swap; the value is clamped at 0 against
    rounding.
    """
    log_cross = 0.5 * (_log_mean_overlap(p, q) + _log_mean_overlap(q, p))
    value = -log_cross + 0.5 * _log_mean_overlap(p, p) \
        + 0.5 * _log_mean_overlap(q, q)
    return max(value, 0.0)


def _equal_weight_particles(ensemble: ParticleEnsemble) -> np.ndarray:
    w = ensemble.weights
    if np.allclose(w, 1.0 / ensemble.size, rtol=0.0, atol=1e-15):
        return ensemble.particles
    return systematic_resample(ensemble, _KDE_SEED).particles


def max_marginal_cs(a: ParticleEnsemble, b: ParticleEnsemble,
                    max_samples: int = 5000) -> float:
    """Maximum over dimensions of the CS divergence between marginal KDEs."""
    if a.dim != b.dim:
        raise ValueError("ensembles have different dimensions")
    pa = _equal_weight_particles(a)
    pb = _equal_weight_particles(b)
    worst = 0.0
    for j in range(a.dim):
        d = cs_divergence(kde_1d(pa[:, j], max_samples),
                          kde_1d(pb[:, j], max_samples))
        worst = max(worst, d)
    return worst


@dataclass(frozen=True)
class GaussianMoments:
    """Mean vector and SPD covariance matrix."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        if cov.shape != (mean.size, mean.size):
            raise ValueError("covariance shape does not match the mean")
        scale = max(float(np.max(np.abs(cov))), 1.0)
        if float(np.max(np.abs(cov - cov.T))) > 1e-12 * scale:
            raise ValueError("covariance is not symmetric")
        np.linalg.cholesky(cov)  # SPD check; LinAlgError propagates

    @property
    def dim(self) -> int:
        return self.mean.size


def moments_from_ensemble(ensemble: ParticleEnsemble) -> GaussianMoments:
    """Weighted empirical mean and (population) covariance of an ensemble."""
    if ensemble.size <= ensemble.dim:
        raise ValueError("need more particles than dimensions")
    w = ensemble.weights
    mean = w @ ensemble.particles
    centered = ensemble.particles - mean
    cov = (centered * w[:, None]).T @ centered
    cov = 0.5 * (cov + cov.T)
    try:
        return GaussianMoments(mean=mean, cov=cov)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("ensemble covariance is singular") from None


def gaussian_kl(p: GaussianMoments, q: GaussianMoments) -> float:
    """KL divergence KL(p || q) between two Gaussians."""
    if p.dim != q.dim:
        raise ValueError("dimension mismatch")
    k = p.dim
    lq = np.linalg.cholesky(q.cov)
    lp = np.linalg.cholesky(p.cov)
    solve = cho_solve((lq, True), p.cov)
    trace = float(np.trace(solve))
    delta = q.mean - p.mean
    y = solve_triangular(lq, delta, lower=True)
    maha = float(y @ y)
    logdet_q = 2.0 * float(np.sum(np.log(np.diag(lq))))
    logdet_p = 2.0 * float(np.sum(np.log(np.diag(lp))))
    return 0.5 * (trace + maha - k + logdet_q - logdet_p)
