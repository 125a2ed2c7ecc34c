"""Adaptive training-point selection loop.

Fit the surrogate on prior draws, run SMC against the surrogate posterior,
pull the next batch of training points from the resulting ensemble,
refit, and repeat until consecutive posteriors agree under the
max-marginal Cauchy-Schwarz divergence (or a budget runs out).

Numerical failures (Cholesky breakdown, ensemble collapse) are surfaced
as AdaptiveRunFailure with the partial run record attached: the
overconfident-estimator pathology is something callers must be able to
observe, not something to hide.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .bounded import (CFBGP, EstimatorMode, LikelihoodEstimator,
                      update_bound, upper_bound_estimate)
from .diagnostics import gaussian_kl, max_marginal_cs, moments_from_ensemble
from .gp import CholeskyFailure, Hyperparameters, TrainingSet, fit
from .hyper import HyperPrior, map_estimate, sample_posterior
from .problems import InverseProblem
from .smc import (DegenerateEnsemble, ParticleEnsemble, SMCConfig, SMCResult,
                  run_smc)

__all__ = [
    "AdaptiveConfig",
    "IterationRecord",
    "RunRecord",
    "AdaptiveRunFailure",
    "fit_estimator",
    "select_new_points",
    "run_adaptive",
    "run_reference",
]

_DUPLICATE_TOL = 1e-6


@dataclass(frozen=True)
class AdaptiveConfig:
    """Settings of the adaptive loop.

    `training_source` is "posterior" for the adaptive strategy and "prior"
    for the naive baseline that draws every batch from the prior (used for
    budget-matched comparisons).  `max_solver_calls` caps the total number
    of forward-model evaluations including initialization.
    """

    n_initial: int
    n_per_iteration: int
    alpha_tol: float
    mode: EstimatorMode
    smc: SMCConfig
    max_iterations: int = 100
    max_solver_calls: int | None = None
    seed: int = 0
    map_restarts: int = 2
    bound_confidence: float = 0.95
    training_source: str = "posterior"

    def __post_init__(self):
        if self.n_initial < 2:
            raise ValueError("n_initial must be >= 2")
        if self.n_per_iteration < 1:
            raise ValueError("n_per_iteration must be >= 1")
        if not self.alpha_tol > 0.0:
            raise ValueError("alpha_tol must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.training_source not in ("posterior", "prior"):
            raise ValueError("training_source must be 'posterior' or 'prior'")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    n_training: int
    solver_calls: int
    bound: float
    hyper_summary: dict
    cs_divergence: float | None
    kl_to_truth: float | None
    smc_stages: int
    wall_time: float
    new_points: np.ndarray = field(repr=False)


@dataclass
class RunRecord:
    """Per-iteration history plus the final ensemble and exit status.

    Status is one of "converged", "max_iterations", "budget_exhausted", or
    "failed:<ExceptionName>".
    """

    problem: str
    mode: str
    seed: int
    iterations: list[IterationRecord] = field(default_factory=list)
    status: str = "running"
    solver_calls: int = 0
    final_ensemble: ParticleEnsemble | None = None

    @property
    def cs_trace(self) -> list[float]:
        return [r.cs_divergence for r in self.iterations
                if r.cs_divergence is not None]

    @property
    def kl_trace(self) -> list[tuple[int, float]]:
        return [(r.solver_calls, r.kl_to_truth) for r in self.iterations
                if r.kl_to_truth is not None]


class AdaptiveRunFailure(RuntimeError):
    """A numerical failure inside the loop, with the partial record kept."""

    def __init__(self, cause: Exception, record: RunRecord):
        super().__init__(f"adaptive run failed: {cause}")
        self.cause = cause
        self.record = record


def _derived_seed(seed: int, *tags: int) -> int:
    ss = np.random.SeedSequence(entropy=(int(seed),) + tuple(int(t) for t in tags))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def fit_estimator(train: TrainingSet, mode: EstimatorMode,
                  prior: HyperPrior | None = None, seed: int = 0,
                  warm_start: Hyperparameters | None = None,
                  map_restarts: int = 2
                  ) -> tuple[LikelihoodEstimator, Hyperparameters]:
    """Hyperparameter inference plus GP fitting for the requested mode.

    Returns the estimator and the MAP hyperparameters (the warm start for
    the next refit).  For CFBGP the posterior sampling chain also starts
    at the MAP.
    """
    if prior is None:
        prior = HyperPrior.scaled_to(train)
    theta_map = map_estimate(train, prior, restarts=map_restarts, seed=seed,
                             init=warm_start)
    if mode.kind == CFBGP:
        draws = sample_posterior(train, prior, mode.n_theta,
                                 seed=_derived_seed(seed, 0xC4B6), init=theta_map)
        gps = tuple(fit(train, theta) for theta in draws)
    else:
        gps = (fit(train, theta_map),)
    return LikelihoodEstimator(mode, gps, train.upper_bound), theta_map


def select_new_points(ensemble: ParticleEnsemble, n_new: int,
                      existing_X: np.ndarray, seed: int,
                      lengthscales: np.ndarray | None = None) -> np.ndarray:
    """Draw training candidates from the weighted ensemble, rejecting any
    that sit within a lengthscale-relative tolerance of known points.

    Raises DegenerateEnsemble after `n_particles` rejected candidates: an
    ensemble that cannot produce fresh points has collapsed.
    """
    if n_new > ensemble.size:
        raise ValueError("cannot draw more points than particles")
    rng = np.random.default_rng(seed)
    existing_X = np.atleast_2d(np.asarray(existing_X, dtype=float))
    scale = np.ones(ensemble.dim) if lengthscales is None \
        else np.asarray(lengthscales, dtype=float)
    taken = list(existing_X)
    chosen = []
    rejected = 0
    while len(chosen) < n_new:
        idx = rng.choice(ensemble.size, p=ensemble.weights)
        candidate = ensemble.particles[idx]
        if taken and np.min([np.max(np.abs(candidate - t) / scale)
                             for t in taken]) <= _DUPLICATE_TOL:
            rejected += 1
            if rejected > ensemble.size:
                raise DegenerateEnsemble(
                    "could not draw distinct training points from the "
                    "ensemble (population collapsed onto the training set)")
            continue
        chosen.append(candidate)
        taken.append(candidate)
    return np.asarray(chosen)


def _hyper_summary(theta: Hyperparameters) -> dict:
    ls = theta.lengthscales
    return {
        "signal_variance": float(theta.signal_variance),
        "noise_variance": float(theta.noise_variance),
        "lengthscale_min": float(np.min(ls)),
        "lengthscale_max": float(np.max(ls)),
        "lengthscale_geomean": float(np.exp(np.mean(np.log(ls)))),
    }


def run_adaptive(problem: InverseProblem, cfg: AdaptiveConfig) -> RunRecord:
    """Run the adaptive loop on `problem`.

    Iteration 0 fits on `n_initial` prior draws; every further iteration
    adds `n_per_iteration` points drawn from the current surrogate
    posterior (or from the prior for the baseline), refits, and re-runs
    SMC.  Stops when the divergence between consecutive posteriors drops
    to `alpha_tol`, or on the iteration/budget caps.
    """
    record = RunRecord(problem=problem.name, mode=cfg.mode.kind,
                       seed=cfg.seed)
    rng_init = np.random.default_rng(_derived_seed(cfg.seed, 0))
    X = np.atleast_2d(problem.sample_prior(rng_init, cfg.n_initial))
    f = np.asarray(problem.log_likelihood(X), dtype=float)
    record.solver_calls = cfg.n_initial

    bound = upper_bound_estimate(problem.n_obs, cfg.bound_confidence) \
        if problem.use_bound else math.inf
    bound = update_bound(bound, f)
    train = TrainingSet(X, f, bound)

    warm: Hyperparameters | None = None
    previous: ParticleEnsemble | None = None
    try:
        for j in range(cfg.max_iterations + 1):
            t0 = time.perf_counter()
            estimator, warm = fit_estimator(
                train, cfg.mode, seed=_derived_seed(cfg.seed, j, 1),
                warm_start=warm, map_restarts=cfg.map_restarts)
            smc_cfg = SMCConfig(
                n_particles=cfg.smc.n_particles,
                n_rejuvenation=cfg.smc.n_rejuvenation,
                ess_threshold=cfg.smc.ess_threshold,
                target_acceptance=cfg.smc.target_acceptance,
                seed=_derived_seed(cfg.seed, j, 2),
                max_stages=cfg.smc.max_stages)
            result = run_smc(problem.log_prior, estimator.log_likelihood,
                             problem.sample_prior, smc_cfg)
            ensemble = result.ensemble

            dcs = None if previous is None \
                else max_marginal_cs(ensemble, previous)
            kl = None
            if problem.analytic_posterior is not None:
                kl = gaussian_kl(problem.analytic_posterior,
                                 moments_from_ensemble(ensemble))
            record.iterations.append(IterationRecord(
                iteration=j, n_training=train.size,
                solver_calls=record.solver_calls, bound=bound,
                hyper_summary=_hyper_summary(warm), cs_divergence=dcs,
                kl_to_truth=kl, smc_stages=result.n_stages,
                wall_time=time.perf_counter() - t0,
                new_points=np.empty((0, problem.dim)) if j == 0 else new_points))
            record.final_ensemble = ensemble

            if dcs is not None and dcs <= cfg.alpha_tol:
                record.status = "converged"
                return record
            if j == cfg.max_iterations:
                record.status = "max_iterations"
                return record
            if cfg.max_solver_calls is not None and \
                    record.solver_calls + cfg.n_per_iteration > cfg.max_solver_calls:
                record.status = "budget_exhausted"
                return record

            if cfg.training_source == "prior":
                rng_j = np.random.default_rng(_derived_seed(cfg.seed, j, 3))
                new_points = np.atleast_2d(
                    problem.sample_prior(rng_j, cfg.n_per_iteration))
            else:
                new_points = select_new_points(
                    ensemble, cfg.n_per_iteration, train.X,
                    seed=_derived_seed(cfg.seed, j, 3),
                    lengthscales=warm.lengthscales)
            f_new = np.asarray(problem.log_likelihood(new_points), dtype=float)
            record.solver_calls += cfg.n_per_iteration
            bound = update_bound(bound, f_new)
            train = train.extended(new_points, f_new, upper_bound=bound)
            previous = ensemble
    except (DegenerateEnsemble, CholeskyFailure) as exc:
        record.status = f"failed:{type(exc).__name__}"
        raise AdaptiveRunFailure(exc, record) from exc


def run_reference(problem: InverseProblem, smc_cfg: SMCConfig) -> SMCResult:
    """Surrogate-free SMC on the true likelihood (the reference posterior)."""
    return run_smc(problem.log_prior, problem.log_likelihood,
                   problem.sample_prior, smc_cfg)
