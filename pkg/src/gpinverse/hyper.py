"""MAP estimation and MCMC sampling of GP hyperparameters.

Hyperparameters carry independent exponential priors and are optimized and
sampled in log-space (positivity for free).  The sampler is Hamiltonian
Monte Carlo with a fixed number of leapfrog steps and dual-averaging step
size adaptation during warmup; a random-walk Metropolis fallback can be
selected for debugging or environments where gradients are suspect.

The constraint on the surrogate is deliberately ignored here: the
hyperparameter posterior conditions on the raw training data only.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .gp import (CholeskyFailure, Hyperparameters, TrainingSet, fit,
                 lml_gradient)

__all__ = [
    "HyperPrior",
    "HyperPosteriorSamples",
    "log_unnorm_posterior",
    "map_estimate",
    "sample_posterior",
]

logger = logging.getLogger(__name__)

_LOG_BOUND = 46.0  # |log theta| cap during optimization, ~1e-20..1e20


@dataclass(frozen=True)
class HyperPrior:
    """Exponential prior rates for the GP hyperparameters.

    Rates apply to the natural (not log) parameters.  `scaled_to` adapts
    the variance rates to the spread of the training values so that "weakly
    regularizing" means the same thing whether the log-likelihood values
    are O(1) or O(1e5).
    """

    signal_rate: float = 0.1
    lengthscale_rate: float = 0.1
    noise_rate: float = 1.0

    def __post_init__(self):
        if min(self.signal_rate, self.lengthscale_rate, self.noise_rate) <= 0:
            raise ValueError("prior rates must be positive")

    @classmethod
    def scaled_to(cls, train: TrainingSet) -> "HyperPrior":
        scale = max(float(np.var(train.f)), 1.0)
        return cls(signal_rate=0.1 / scale, lengthscale_rate=0.1,
                   noise_rate=1.0 / scale)

    def rate_vector(self, dim: int) -> np.ndarray:
        """Rates packed as [signal, lengthscales..., noise]."""
        return np.concatenate(([self.signal_rate],
                               np.full(dim, self.lengthscale_rate),
                               [self.noise_rate]))


@dataclass(frozen=True)
class HyperPosteriorSamples:
    """Posterior draws of the hyperparameters plus sampler diagnostics."""

    draws: tuple[Hyperparameters, ...]
    acceptance_rate: float

    def __post_init__(self):
        if len(self.draws) < 1:
            raise ValueError("need at least one draw")

    def __len__(self):
        return len(self.draws)

    def __iter__(self):
        return iter(self.draws)


def log_unnorm_posterior(hyper: Hyperparameters, train: TrainingSet,
                         prior: HyperPrior) -> float:
    """Log marginal likelihood plus exponential log-priors (natural space)."""
    g = fit(train, hyper)
    theta = np.concatenate(([hyper.signal_variance], hyper.lengthscales,
                            [hyper.noise_variance]))
    rates = prior.rate_vector(hyper.dim)
    return g.log_marginal_likelihood() + float(np.sum(np.log(rates) - rates * theta))


def _logspace_posterior(v: np.ndarray, train: TrainingSet, prior: HyperPrior,
                        jacobian: bool) -> tuple[float, np.ndarray]:
    """(value, gradient) of the posterior over log-parameters.

    With `jacobian` the change-of-variables term sum(v) is included, which
    turns the expression into a proper density over log-parameters (used
    for sampling); without it the function is just the natural-space
    objective reparameterized (used for MAP optimization).
    """
    if np.any(np.abs(v) > _LOG_BOUND):
        return -math.inf, np.zeros_like(v)
    hyper = Hyperparameters.from_log_vector(v)
    theta = np.exp(v)
    rates = prior.rate_vector(hyper.dim)
    try:
        g = fit(train, hyper)
    except CholeskyFailure:
        return -math.inf, np.zeros_like(v)
    value = g.log_marginal_likelihood() + float(np.sum(np.log(rates) - rates * theta))
    grad = lml_gradient(train, hyper, gp=g) - rates * theta
    if jacobian:
        value += float(np.sum(v))
        grad = grad + 1.0
    return value, grad


def _heuristic_log_init(train: TrainingSet) -> np.ndarray:
    # Start with noise at 1% of the data variance: small enough to end up
    # near interpolation, large enough to keep the first misfit term from
    # swamping the lengthscale direction.
    var_f = max(float(np.var(train.f)), 1e-12)
    spread = np.std(train.X, axis=0)
    spread = np.where(spread > 1e-8, spread, 1.0)
    return np.log(np.concatenate(([var_f], spread, [1e-2 * var_f])))


def map_estimate(train: TrainingSet, prior: HyperPrior, restarts: int = 2,
                 seed: int = 0,
                 init: Hyperparameters | None = None) -> Hyperparameters:
    """MAP hyperparameters by L-BFGS-B over log-parameters with restarts.

    The first start is `init` when given (warm start) and a data-driven
    heuristic otherwise; remaining starts are seeded log-space
    perturbations.  Returns the best local maximizer found; raises only if
    every restart fails.
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    rng = np.random.default_rng(seed)
    base = init.to_log_vector() if init is not None else _heuristic_log_init(train)
    starts = [base]
    heur = _heuristic_log_init(train)
    for _ in range(restarts - 1):
        starts.append(heur + rng.normal(scale=1.5, size=base.size))

    def objective(v):
        value, grad = _logspace_posterior(v, train, prior, jacobian=False)
        if not math.isfinite(value):
            return 1e20, np.zeros_like(v)
        return -value, -grad

    best_v, best_val = None, -math.inf
    failures = []
    for start in starts:
        try:
            res = minimize(objective, np.clip(start, -_LOG_BOUND, _LOG_BOUND),
                           method="L-BFGS-B", jac=True,
                           options={"maxiter": 1000, "ftol": 0.0,
                                    "gtol": 1e-9, "maxls": 50})
        except Exception as exc:  # optimizer failure, keep other restarts
            failures.append(exc)
            continue
        value = -float(res.fun)
        if math.isfinite(value) and value > best_val:
            best_val, best_v = value, res.x
    if best_v is None:
        raise RuntimeError(f"all {restarts} MAP restarts failed: {failures}")
    best_v = _newton_polish(best_v, train, prior)
    return Hyperparameters.from_log_vector(best_v)


def _newton_polish(v, train, prior, max_steps: int = 5):
    """Newton steps on the analytic gradient to tighten the first-order
    condition past the L-BFGS float floor.  Keeps the incumbent whenever a
    step fails to reduce the gradient norm."""
    h = 1e-5

    def grad_at(u):
        return _logspace_posterior(u, train, prior, jacobian=False)[1]

    g = grad_at(v)
    for _ in range(max_steps):
        norm = float(np.linalg.norm(g))
        if norm < 1e-9:
            break
        n = v.size
        H = np.empty((n, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = h
            H[:, j] = (grad_at(v + e) - grad_at(v - e)) / (2.0 * h)
        H = 0.5 * (H + H.T)
        try:
            delta = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            break
        v_try = v + delta
        g_try = grad_at(v_try)
        if not np.all(np.isfinite(g_try)) \
                or np.linalg.norm(g_try) >= norm:
            break
        v, g = v_try, g_try
    return v


def sample_posterior(train: TrainingSet, prior: HyperPrior, n_draws: int,
                     seed: int = 0, init: Hyperparameters | None = None,
                     method: str = "hmc", warmup: int = 200, thin: int = 2,
                     n_leapfrog: int = 10, target_accept: float = 0.7,
                     fixed: dict[int, float] | None = None
                     ) -> HyperPosteriorSamples:
    """Draw approximately-posterior hyperparameter samples.

    The chain starts at `init` (or the MAP estimate when not given), runs
    `warmup` adaptation iterations, then keeps every `thin`-th draw until
    `n_draws` are collected.  `fixed` pins packed log-vector components to
    natural-space values, which is handy for low-dimensional cross-checks.
    Deterministic for a given seed.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    if method not in ("hmc", "rwm"):
        raise ValueError("method must be 'hmc' or 'rwm'")
    if init is None:
        init = map_estimate(train, prior, restarts=1, seed=seed)
    v0 = init.to_log_vector()
    free = np.ones(v0.size, dtype=bool)
    if fixed:
        for idx, value in fixed.items():
            v0[idx] = math.log(value)
            free[idx] = False

    def logpdf(v):
        return _logspace_posterior(v, train, prior, jacobian=True)

    rng = np.random.default_rng(seed)
    n_keep = n_draws
    n_iter = warmup + thin * n_keep
    if method == "hmc":
        chain, acc = _hmc_chain(logpdf, v0, free, rng, n_iter, warmup,
                                n_leapfrog, target_accept)
    else:
        chain, acc = _rwm_chain(logpdf, v0, free, rng, n_iter, warmup)
    kept = chain[warmup + thin - 1::thin][:n_keep]
    if not 0.1 <= acc <= 0.95:
        logger.warning("hyperparameter MCMC acceptance rate %.3f outside "
                       "[0.1, 0.95]", acc)
    draws = tuple(Hyperparameters.from_log_vector(v) for v in kept)
    return HyperPosteriorSamples(draws=draws, acceptance_rate=acc)


def _leapfrog(logpdf, v, grad, p, step, n_steps, free):
    """One trajectory; returns (v, logp, grad, p, diverged)."""
    v_new, grad_new, p_new = v.copy(), grad.copy(), p.copy()
    p_new = p_new + 0.5 * step * grad_new * free
    logp_new = -math.inf
    for leap in range(n_steps):
        v_new = v_new + step * p_new * free
        logp_new, grad_new = logpdf(v_new)
        if not math.isfinite(logp_new):
            return v_new, logp_new, grad_new, p_new, True
        frac = 1.0 if leap < n_steps - 1 else 0.5
        p_new = p_new + frac * step * grad_new * free
    return v_new, logp_new, grad_new, p_new, False


def _reasonable_step(logpdf, v, logp, grad, free, rng):
    """Double or halve the step until one-step acceptance crosses 1/2."""
    step = 0.1
    p = rng.standard_normal(v.size)
    p[~free] = 0.0

    def accept_log(s):
        v1, logp1, _, p1, diverged = _leapfrog(logpdf, v, grad, p, s, 1, free)
        if diverged:
            return -math.inf
        return (logp1 - 0.5 * float(p1 @ p1)) - (logp - 0.5 * float(p @ p))

    direction = 1.0 if accept_log(step) > math.log(0.5) else -1.0
    for _ in range(40):
        step *= 2.0 ** direction
        a = accept_log(step)
        if direction > 0 and a <= math.log(0.5):
            break
        if direction < 0 and a >= math.log(0.5):
            break
    return min(max(step, 1e-8), 10.0)


def _hmc_chain(logpdf, v0, free, rng, n_iter, warmup, n_leapfrog,
               target_accept):
    v = v0.copy()
    logp, grad = logpdf(v)
    if not math.isfinite(logp):
        raise RuntimeError("sampler initialization has zero posterior density")

    # dual averaging state (Hoffman & Gelman constants)
    step = _reasonable_step(logpdf, v, logp, grad, free, rng)
    mu = math.log(10.0 * step)
    log_step_avg = math.log(step)
    h_avg = 0.0
    gamma, t0, kappa = 0.05, 10.0, 0.75

    chain = np.empty((n_iter, v.size))
    n_accept = 0.0
    for it in range(n_iter):
        p = rng.standard_normal(v.size)
        p[~free] = 0.0
        v_new, logp_new, grad_new, p_new, diverged = _leapfrog(
            logpdf, v, grad, p, step, n_leapfrog, free)
        if diverged:
            accept_prob = 0.0
        else:
            h0 = logp - 0.5 * float(p @ p)
            h1 = logp_new - 0.5 * float(p_new @ p_new)
            accept_prob = min(1.0, math.exp(min(h1 - h0, 0.0)))
        if rng.random() < accept_prob:
            v, logp, grad = v_new, logp_new, grad_new
            if it >= warmup:
                n_accept += 1.0
        if it < warmup:
            m = it + 1
            h_avg = (1.0 - 1.0 / (m + t0)) * h_avg \
                + (target_accept - accept_prob) / (m + t0)
            log_step = mu - math.sqrt(m) / gamma * h_avg
            eta = m ** (-kappa)
            log_step_avg = eta * log_step + (1.0 - eta) * log_step_avg
            step = math.exp(log_step)
            if it == warmup - 1:
                step = math.exp(log_step_avg)
        chain[it] = v
    acc_rate = n_accept / max(n_iter - warmup, 1)
    return chain, acc_rate


def _rwm_chain(logpdf, v0, free, rng, n_iter, warmup):
    v = v0.copy()
    logp, _ = logpdf(v)
    if not math.isfinite(logp):
        raise RuntimeError("sampler initialization has zero posterior density")
    scale = 0.3
    chain = np.empty((n_iter, v.size))
    n_accept = 0.0
    for it in range(n_iter):
        prop = v + scale * rng.standard_normal(v.size) * free
        logp_prop, _ = logpdf(prop)
        accept_prob = math.exp(min(logp_prop - logp, 0.0)) \
            if math.isfinite(logp_prop) else 0.0
        if rng.random() < accept_prob:
            v, logp = prop, logp_prop
            if it >= warmup:
                n_accept += 1.0
        if it < warmup:
            scale *= math.exp(0.7 * (accept_prob - 0.3) / math.sqrt(it + 1))
        chain[it] = v
    return chain, n_accept / max(n_iter - warmup, 1)
