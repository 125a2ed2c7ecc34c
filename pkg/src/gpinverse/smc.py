"""Sequential Monte Carlo with adaptive likelihood tempering.

Particles start at the prior and are moved to the posterior through
bridging distributions prior(x) * exp(beta * loglik(x)).  Each stage picks
the next tempering exponent by bisection so that the effective sample size
after reweighting lands on a fixed fraction of the particle count, then
resamples systematically and applies random-walk Metropolis rejuvenation
steps targeting the current bridge.

All log-density callables are batched: they take an (n, dim) array and
return an (n,) array.  Runs are deterministic for a given seed; all
randomness is drawn from streams keyed on (seed, stage), with per-particle
values taken as rows so that parallel likelihood evaluation cannot change
the result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ParticleEnsemble",
    "SMCConfig",
    "SMCResult",
    "DegenerateEnsemble",
    "ess",
    "systematic_resample",
    "run_smc",
]


class DegenerateEnsemble(RuntimeError):
    """The particle population collapsed (weights, support, or diversity)."""


@dataclass(frozen=True)
class ParticleEnsemble:
    """Weighted particles; weights are normalized and coordinates finite."""

    particles: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        particles = np.atleast_2d(np.asarray(self.particles, dtype=float))
        weights = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "particles", particles)
        object.__setattr__(self, "weights", weights)
        if particles.shape[0] != weights.shape[0]:
            raise ValueError("particles and weights disagree in length")
        if np.any(np.isnan(particles)):
            raise ValueError("particle coordinates contain NaN")
        if np.any(weights < 0.0):
            raise ValueError("weights must be non-negative")
        if abs(float(np.sum(weights)) - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1 within 1e-12")

    @property
    def size(self) -> int:
        return self.particles.shape[0]

    @property
    def dim(self) -> int:
        return self.particles.shape[1]


@dataclass(frozen=True)
class SMCConfig:
    n_particles: int = 1000
    n_rejuvenation: int = 10
    ess_threshold: float = 0.5
    target_acceptance: float = 0.3
    seed: int = 0
    max_stages: int = 1000

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("n_particles must be >= 2")
        if self.n_rejuvenation < 1:
            raise ValueError("n_rejuvenation must be >= 1")
        if not 0.0 < self.ess_threshold < 1.0:
            raise ValueError("ess_threshold must lie in (0, 1)")
        if not 0.0 < self.target_acceptance < 1.0:
            raise ValueError("target_acceptance must lie in (0, 1)")


@dataclass(frozen=True)
class SMCResult:
    """Final ensemble plus run diagnostics."""

    ensemble: ParticleEnsemble
    betas: tuple[float, ...]
    acceptance_rates: tuple[float, ...] = field(repr=False)
    n_likelihood_calls: int = 0
    n_stages: int = 0


def ess(weights: np.ndarray) -> float:
    """Effective sample size 1 / sum(w_i^2) of normalized weights."""
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w * w))


def _logsumexp(a):
    m = np.max(a)
    if not math.isfinite(m):
        return m
    return m + math.log(np.sum(np.exp(a - m)))


def _normalized_weights(log_w):
    lse = _logsumexp(log_w)
    if not math.isfinite(lse):
        raise DegenerateEnsemble("all particle weights vanished")
    w = np.exp(log_w - lse)
    return w / np.sum(w)


def _systematic_indices(weights, u):
    n = weights.shape[0]
    positions = (np.arange(n) + u) / n
    return np.searchsorted(np.cumsum(weights), positions, side="right").clip(0, n - 1)


def systematic_resample(ensemble: ParticleEnsemble, seed: int) -> ParticleEnsemble:
    """Systematic resampling: expected copy count of particle i is n * w_i."""
    rng = np.random.default_rng(seed)
    idx = _systematic_indices(ensemble.weights, rng.random())
    n = ensemble.size
    return ParticleEnsemble(ensemble.particles[idx], np.full(n, 1.0 / n))


def _next_beta(beta, log_lik, target_ess):
    """Largest admissible tempering increment: full jump to 1 when the ESS
    allows it, otherwise the bisection solution of ESS(d_beta) = target."""
    remaining = 1.0 - beta

    def ess_at(d_beta):
        return ess(_normalized_weights(d_beta * log_lik))

    if ess_at(remaining) >= target_ess:
        return 1.0, remaining
    lo, hi = 0.0, remaining
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if ess_at(mid) >= target_ess:
            lo = mid
        else:
            hi = mid
    d_beta = max(lo, remaining * 1e-12)
    return beta + d_beta, d_beta


def _stage_rng(seed, stage):
    return np.random.default_rng(np.random.SeedSequence(entropy=(seed, stage)))


def _proposal_cholesky(particles):
    cov = np.cov(particles, rowvar=False, ddof=0)
    cov = np.atleast_2d(cov)
    scale = float(np.trace(cov)) / cov.shape[0]
    if scale <= 0.0 or not math.isfinite(scale):
        raise DegenerateEnsemble("particle population has collapsed to a point")
    cov = cov + 1e-12 * scale * np.eye(cov.shape[0])
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return np.diag(np.sqrt(np.maximum(np.diag(cov), 1e-12 * scale)))


def run_smc(log_prior, log_likelihood, prior_sampler,
            cfg: SMCConfig) -> SMCResult:
    """Run adaptive-tempering SMC toward prior(x) * exp(loglik(x)).

    `prior_sampler(rng, n)` draws from the prior; the two density
    callables are batched.  Raises DegenerateEnsemble when the weights or
    the particle diversity collapse, which is the expected failure mode of
    overconfident surrogate likelihoods.
    """
    n = cfg.n_particles
    rng0 = _stage_rng(cfg.seed, 0)
    particles = np.atleast_2d(np.asarray(prior_sampler(rng0, n), dtype=float))
    if particles.shape[0] != n:
        raise ValueError("prior sampler returned the wrong number of particles")
    dim = particles.shape[1]

    n_calls = 0

    def lik(X):
        nonlocal n_calls
        n_calls += X.shape[0]
        return np.asarray(log_likelihood(X), dtype=float)

    log_l = lik(particles)
    log_p = np.asarray(log_prior(particles), dtype=float)
    if not np.all(np.isfinite(log_p)):
        raise ValueError("prior sampler produced points outside the prior support")
    if np.all(~np.isfinite(log_l)):
        raise DegenerateEnsemble("likelihood is degenerate on every prior draw")

    beta = 0.0
    betas: list[float] = []
    acceptance: list[float] = []
    prop_scale = 1.0
    base_scale = 2.38 / math.sqrt(dim)
    target_ess = cfg.ess_threshold * n

    stage = 0
    while beta < 1.0:
        stage += 1
        if stage > cfg.max_stages:
            raise DegenerateEnsemble(
                f"tempering did not reach 1 within {cfg.max_stages} stages "
                f"(beta={beta:.3e})")
        rng = _stage_rng(cfg.seed, stage)

        beta_new, d_beta = _next_beta(beta, log_l, target_ess)
        weights = _normalized_weights(d_beta * log_l)
        if ess(weights) < 2.0:
            raise DegenerateEnsemble(
                f"effective sample size below 2 at stage {stage}")

        idx = _systematic_indices(weights, rng.random())
        particles = particles[idx]
        log_l = log_l[idx]
        log_p = log_p[idx]

        chol = _proposal_cholesky(particles)
        for _ in range(cfg.n_rejuvenation):
            z = rng.standard_normal((n, dim))
            proposal = particles + (base_scale * prop_scale) * (z @ chol.T)
            lp_prop = np.asarray(log_prior(proposal), dtype=float)
            ll_prop = np.full(n, -np.inf)
            in_support = np.isfinite(lp_prop)
            if np.any(in_support):
                ll_prop[in_support] = lik(proposal[in_support])
            log_accept = (lp_prop + beta_new * ll_prop) \
                - (log_p + beta_new * log_l)
            accept = np.log(rng.random(n)) < log_accept
            particles = np.where(accept[:, None], proposal, particles)
            log_l = np.where(accept, ll_prop, log_l)
            log_p = np.where(accept, lp_prop, log_p)
            rate = float(np.mean(accept))
            prop_scale *= math.exp(0.7 * (rate - cfg.target_acceptance))
            prop_scale = min(max(prop_scale, 1e-3), 1e3)
            acceptance.append(rate)

        beta = beta_new
        betas.append(beta)

    uniform = np.full(n, 1.0 / n)
    return SMCResult(ensemble=ParticleEnsemble(particles, uniform),
                     betas=tuple(betas),
                     acceptance_rates=tuple(acceptance),
                     n_likelihood_calls=n_calls,
                     n_stages=stage)
