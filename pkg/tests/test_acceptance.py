"""Acceptance suite: every exit criterion at its stated tolerance.

Each test prints one PASS/FAIL line (visible with -s or in the captured
output on failure).  The desk-scale diffusion experiments are marked
`slow`; everything else runs in seconds to minutes.
"""

import math

import numpy as np
import pytest
from scipy.integrate import quad

from gpinverse.adaptive import (AdaptiveConfig, AdaptiveRunFailure,
                                run_adaptive, run_reference)
from gpinverse.bounded import (CFBGP, CGPMAP_II, GPMAP_I, EstimatorMode,
                               LikelihoodEstimator, TruncatedNormal,
                               estimate_log_likelihood,
                               truncated_normal_quantile, update_bound,
                               upper_bound_estimate)
from gpinverse.diagnostics import (GaussianMoments, cs_divergence,
                                   gaussian_kl, kde_1d, max_marginal_cs)
from gpinverse.gp import Hyperparameters, TrainingSet, fit
from gpinverse.problems import (DiffusionGrid, build_diffusion_problem,
                                build_kle, gaussian_benchmark, interior_nodes,
                                solve_diffusion)
from gpinverse.smc import SMCConfig, run_smc


def _report(criterion: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    print(f"ACCEPTANCE {criterion}: {status} {detail}".rstrip())
    assert ok, f"{criterion} failed: {detail}"


# -----------------------------------------------------------------------
# criteria 1 and 2: benchmark convergence and the prior-sampling baseline
# -----------------------------------------------------------------------

_BENCH_SEEDS = (1, 2, 3, 4, 5)


@pytest.fixture(scope="module")
def benchmark_runs():
    problem = gaussian_benchmark(10, 1e-4, seed=42)
    smc = SMCConfig(n_particles=2000, n_rejuvenation=25)
    results = {}
    for source in ("posterior", "prior"):
        init_kl, final_kl = [], []
        for seed in _BENCH_SEEDS:
            cfg = AdaptiveConfig(
                n_initial=20, n_per_iteration=10, alpha_tol=1e-12,
                mode=EstimatorMode(CGPMAP_II, q=0.9), smc=smc,
                max_iterations=100, max_solver_calls=150, seed=seed,
                training_source=source)
            record = run_adaptive(problem, cfg)
            trace = dict(record.kl_trace)
            init_kl.append(trace[20])
            final_kl.append(trace[max(c for c in trace if c <= 150)])
        results[source] = (np.mean(init_kl), np.mean(final_kl))
    return results


def test_criterion_1_benchmark_convergence(benchmark_runs):
    kl_init, kl_final = benchmark_runs["posterior"]
    ratio = kl_final / kl_init
    _report("1 benchmark-convergence", ratio < 0.05,
            f"(mean KL {kl_init:.1f} @20 calls -> {kl_final:.4f} @<=150, "
            f"ratio {ratio:.2e} < 0.05)")


def test_criterion_2_prior_baseline_is_worse(benchmark_runs):
    _, kl_adaptive = benchmark_runs["posterior"]
    _, kl_prior = benchmark_runs["prior"]
    _report("2 prior-baseline-worse", kl_adaptive < kl_prior,
            f"(adaptive {kl_adaptive:.4f} < prior-only {kl_prior:.4f} "
            "at 150 solver calls)")


# -----------------------------------------------------------------------
# criterion 3: estimator mathematics
# -----------------------------------------------------------------------

def test_criterion_3a_quantile_cdf_round_trip():
    rng = np.random.default_rng(33)
    worst = 0.0
    for _ in range(1000):
        s = 10.0 ** rng.uniform(-2, 2)
        m = -rng.uniform(0.0, 1000.0) * s
        bound = m + rng.uniform(-200.0, 20.0) * s
        q = rng.uniform(1e-6, 1 - 1e-6)
        value = truncated_normal_quantile(q, m, s, bound)
        worst = max(worst, abs(TruncatedNormal(m, s, bound).cdf(value) - q))
    _report("3a quantile-roundtrip", worst <= 1e-8,
            f"(worst |CDF(quantile) - q| = {worst:.2e} over 1000 draws)")


def _example_gp(seed=3):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(8, 2))
    f = -np.sum((X - 0.3) ** 2, axis=1) * 40.0 - 0.5
    bound = update_bound(upper_bound_estimate(5), f)
    train = TrainingSet(X, f, bound)
    hyper = Hyperparameters(float(np.var(f)) + 1.0, np.array([1.0, 1.2]), 1e-8)
    return fit(train, hyper), bound


def test_criterion_3b_cfbgp_reduces_to_cgpmap():
    gp, bound = _example_gp()
    X = np.random.default_rng(4).normal(size=(200, 2)) * 2.0
    cgp = estimate_log_likelihood(
        X, LikelihoodEstimator(EstimatorMode(CGPMAP_II, q=0.9), (gp,), bound))
    cfb = estimate_log_likelihood(
        X, LikelihoodEstimator(EstimatorMode(CFBGP, q=0.9, n_theta=7),
                               (gp,) * 7, bound))
    worst = float(np.max(np.abs(cgp - cfb)))
    _report("3b cfbgp-identical-thetas", worst <= 1e-8,
            f"(max |CFBGP - CGPMAP-II| = {worst:.2e})")


def test_criterion_3c_consistency_limit():
    bound = -0.5
    ok = True
    details = []
    for m in (bound - 0.7, bound):
        for s in (1e-1, 1e-2, 1e-3):
            estimate = truncated_normal_quantile(0.9, m, s, bound)
            gap = abs(estimate - m)
            details.append(f"s={s:g}: |est-m|={gap:.2e}")
            ok &= gap <= 3.0 * s
    _report("3c consistency-limit", ok, "(" + ", ".join(details[:3]) + ")")


def test_criterion_3d_constrained_variance_reduction():
    rng = np.random.default_rng(5)
    ok = True
    for _ in range(1000):
        m = rng.uniform(-50, 5)
        s = 10.0 ** rng.uniform(-3, 2)
        bound = m + rng.uniform(-30, 10) * s
        tn = TruncatedNormal(m, s, bound)
        ok &= tn.variance() <= s * s + 1e-12 * s * s
    _report("3d variance-reduction", ok,
            "(truncated variance <= unconstrained on 1000 random instances)")


def _chi2_quantile_oracle(p: float, dof: int) -> float:
    """Bisection on the chi-squared CDF evaluated by adaptive quadrature."""
    a = dof / 2.0

    def pdf(t):
        return math.exp((a - 1.0) * math.log(t) - t / 2.0
                        - a * math.log(2.0) - math.lgamma(a))

    left = max(0.0, dof - 60.0 * math.sqrt(2.0 * dof))

    def cdf(x):
        lo = 0.0 if x <= left else left
        return quad(pdf, lo, x, limit=300)[0]

    lo, hi = 0.0, 2.0 * dof + 200.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_criterion_3e_upper_bound_oracle():
    worst = 0.0
    for n_obs in (1, 10, 361, 7963):
        oracle = -0.5 * _chi2_quantile_oracle(0.05, n_obs)
        worst = max(worst, abs(upper_bound_estimate(n_obs) - oracle))
    _report("3e upper-bound-oracle", worst <= 1e-8,
            f"(worst |bound - quadrature oracle| = {worst:.2e})")


# -----------------------------------------------------------------------
# criterion 4: SMC against the conjugate posterior
# -----------------------------------------------------------------------

def test_criterion_4_smc_conjugate_oracle():
    problem = gaussian_benchmark(2, 1e-4, seed=20)
    post = problem.analytic_posterior
    n_p = 1000
    passes = 0
    for seed in range(20):
        result = run_smc(problem.log_prior, problem.log_likelihood,
                         problem.sample_prior,
                         SMCConfig(n_particles=n_p, n_rejuvenation=20,
                                   seed=seed))
        particles = result.ensemble.particles
        mean = particles.mean(axis=0)
        cov = np.cov(particles, rowvar=False, ddof=0)
        se = math.sqrt(post.cov[0, 0] / n_p)
        ok_mean = bool(np.all(np.abs(mean - post.mean) <= 3.0 * se))
        ok_cov = (np.linalg.norm(cov - post.cov)
                  <= 0.10 * np.linalg.norm(post.cov))
        passes += ok_mean and ok_cov
    _report("4 smc-conjugate", passes >= 18, f"({passes}/20 seeds passed)")


# -----------------------------------------------------------------------
# criteria 5 and 8: desk-scale diffusion (long-running suite)
# -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_scale():
    setup = build_diffusion_problem(n_cells=10, lengthscale=0.3,
                                    noise_variance=1e-4, seed=11)
    reference = run_reference(setup.problem,
                              SMCConfig(n_particles=500, n_rejuvenation=15,
                                        seed=99))
    return setup, reference


@pytest.mark.slow
def test_criterion_5_diffusion_desk_scale(desk_scale):
    setup, reference = desk_scale
    cfg = AdaptiveConfig(
        n_initial=40, n_per_iteration=20, alpha_tol=1e-2,
        mode=EstimatorMode(CGPMAP_II, q=0.9),
        smc=SMCConfig(n_particles=500, n_rejuvenation=15),
        max_iterations=100, max_solver_calls=600, seed=5)
    record = run_adaptive(setup.problem, cfg)
    divergence = max_marginal_cs(record.final_ensemble, reference.ensemble)
    ok = (record.status == "converged" and record.solver_calls <= 600
          and divergence <= 0.2)
    _report("5 diffusion-desk-scale", ok,
            f"(status {record.status} at {record.solver_calls} calls, "
            f"divergence to reference {divergence:.4f} <= 0.2)")


@pytest.mark.slow
def test_criterion_8_gpmap1_pathology_observable(desk_scale):
    setup, reference = desk_scale
    cfg = AdaptiveConfig(
        n_initial=40, n_per_iteration=20, alpha_tol=1e-2,
        mode=EstimatorMode(GPMAP_I),
        smc=SMCConfig(n_particles=500, n_rejuvenation=15),
        max_iterations=100, max_solver_calls=600, seed=5)
    try:
        record = run_adaptive(setup.problem, cfg)
    except AdaptiveRunFailure as failure:
        _report("8 gpmap1-pathology", True,
                f"(failure surfaced: {type(failure.cause).__name__})")
        return
    if record.status != "converged":
        _report("8 gpmap1-pathology", True,
                f"(no convergence within budget: {record.status})")
        return
    divergence = max_marginal_cs(record.final_ensemble, reference.ensemble)
    _report("8 gpmap1-pathology", divergence <= 1.0,
            f"(converged; divergence to reference {divergence:.4f} must "
            "not exceed 1.0)")


# -----------------------------------------------------------------------
# criteria 6, 7, 9: fast numerical fidelity checks
# -----------------------------------------------------------------------

def test_criterion_6_kle_mode_count():
    grid = np.linspace(0.0, 1.0, 20)
    xx, yy = np.meshgrid(grid, grid, indexing="ij")
    points = np.column_stack([xx.ravel(), yy.ravel()])
    kle = build_kle(points, 0.2, variance_target=0.99)
    _report("6 kle-mode-count", 28 <= kle.n_modes <= 32,
            f"(k = {kle.n_modes}, expected 30 +/- 2)")


def test_criterion_7_pde_solver_order():
    def mms_error(n):
        pts = interior_nodes(n)
        exact = np.sin(np.pi * pts[:, 0]) * np.sin(np.pi * pts[:, 1])
        source = -2.0 * np.pi ** 2 * exact
        u = solve_diffusion(DiffusionGrid(n, np.ones((n, n))), source)
        return float(np.max(np.abs(u - exact)))

    ratio = mms_error(10) / mms_error(20)
    _report("7 pde-order", 3.5 <= ratio <= 4.5,
            f"(Linf error ratio h->h/2 = {ratio:.3f})")


def test_criterion_9_divergence_diagnostics():
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(50):
        p = kde_1d(rng.standard_normal(rng.integers(5, 60))
                   * rng.uniform(0.3, 2.0) + rng.uniform(-3, 3))
        q = kde_1d(rng.standard_normal(rng.integers(5, 60))
                   * rng.uniform(0.3, 2.0) + rng.uniform(-3, 3))
        centers = np.concatenate([p.means, q.means])
        h = max(p.bandwidth, q.bandwidth)
        xs = np.linspace(centers.min() - 12 * h, centers.max() + 12 * h,
                         200_001)
        pp, qq = p.pdf(xs), q.pdf(xs)
        cross = np.trapezoid(pp * qq, xs)
        oracle = -math.log(cross / math.sqrt(
            np.trapezoid(pp * pp, xs) * np.trapezoid(qq * qq, xs)))
        worst = max(worst, abs(cs_divergence(p, q) - oracle))
    kl = gaussian_kl(GaussianMoments(np.array([0.0]), np.array([[1.0]])),
                     GaussianMoments(np.array([1.0]), np.array([[1.0]])))
    ok = worst <= 1e-6 and abs(kl - 0.5) <= 1e-12
    _report("9 divergence-diagnostics", ok,
            f"(closed-vs-quadrature worst {worst:.2e}, "
            f"KL(N(0,1)||N(1,1)) = {kl:.15f})")
