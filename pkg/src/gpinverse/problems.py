"""Built-in inverse problems.

Three targets exercise the inference machinery:

* an analytic Gaussian benchmark whose posterior is known in closed form,
* a 2-D multimodal energy target on a uniform box (adaptive-sampling demo;
  the upper bound is disabled because the target is an energy, not a
  Gaussian misfit),
* a diffusion equation on the unit square whose log-diffusivity field is
  parameterized by a Karhunen-Loeve expansion, with synthetic noisy
  observations of the solution at the interior grid nodes.

All log-density callables are batched, matching the SMC engine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as sparse_linalg

from .diagnostics import GaussianMoments

__all__ = [
    "InverseProblem",
    "KLExpansion",
    "DiffusionGrid",
    "DiffusionSetup",
    "gaussian_benchmark",
    "energy_target",
    "build_kle",
    "realize_field",
    "solve_diffusion",
    "synthesize_observations",
    "build_diffusion_problem",
    "field_csv_rows",
    "solution_csv_rows",
]


@dataclass(frozen=True)
class InverseProblem:
    """A prior, a batched unnormalized log-likelihood, and metadata.

    `n_obs` drives the chi-squared upper bound; `use_bound` is off for
    targets that are not Gaussian misfits.  `analytic_posterior` is set
    when the posterior is known in closed form.
    """

    name: str
    dim: int
    n_obs: int
    log_prior: Callable[[np.ndarray], np.ndarray]
    sample_prior: Callable[[np.random.Generator, int], np.ndarray]
    log_likelihood: Callable[[np.ndarray], np.ndarray]
    use_bound: bool = True
    analytic_posterior: GaussianMoments | None = field(default=None)


def _standard_normal_prior(dim):
    const = -0.5 * dim * math.log(2.0 * math.pi)

    def log_prior(X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return -0.5 * np.sum(X * X, axis=1) + const

    def sample(rng, n):
        return rng.standard_normal((n, dim))

    return log_prior, sample


def gaussian_benchmark(n_x: int, sigma2: float = 1e-4,
                       seed: int = 0) -> InverseProblem:
    """Standard-normal prior with a Gaussian likelihood centered at a
    random point `a`, so the posterior is available analytically."""
    if n_x < 1:
        raise ValueError("n_x must be >= 1")
    if sigma2 <= 0.0:
        raise ValueError("sigma2 must be positive")
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(n_x)
    log_prior, sample = _standard_normal_prior(n_x)

    def log_likelihood(X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return -np.sum((X - a) ** 2, axis=1) / (2.0 * sigma2)

    shrink = 1.0 / (1.0 + sigma2)
    posterior = GaussianMoments(mean=shrink * a,
                                cov=sigma2 * shrink * np.eye(n_x))
    return InverseProblem(
        name="gaussian-benchmark", dim=n_x, n_obs=n_x,
        log_prior=log_prior, sample_prior=sample,
        log_likelihood=log_likelihood, use_bound=True,
        analytic_posterior=posterior)


def energy_target() -> InverseProblem:
    """2-D ring-plus-two-wells energy on a uniform [-5, 5]^2 prior."""
    lo, hi = -5.0, 5.0
    log_area = 2.0 * math.log(hi - lo)

    def log_prior(X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        inside = np.all((X >= lo) & (X <= hi), axis=1)
        return np.where(inside, -log_area, -np.inf)

    def sample(rng, n):
        return rng.uniform(lo, hi, size=(n, 2))

    def log_likelihood(X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        r = np.sqrt(np.sum(X * X, axis=1))
        ring = 0.5 * ((r - 2.0) / 0.4) ** 2
        wells = np.logaddexp(-0.5 * ((X[:, 0] - 2.0) / 0.6) ** 2,
                             -0.5 * ((X[:, 0] + 2.0) / 0.6) ** 2)
        return -(ring - wells)

    return InverseProblem(
        name="energy-demo", dim=2, n_obs=1,
        log_prior=log_prior, sample_prior=sample,
        log_likelihood=log_likelihood, use_bound=False)


@dataclass(frozen=True)
class KLExpansion:
    """Truncated eigenexpansion of a squared-exponential covariance field.

    `modes` holds the eigenvectors scaled by the square roots of their
    eigenvalues, so standard-normal coefficients give the field directly.
    """

    points: np.ndarray
    eigenvalues: np.ndarray
    modes: np.ndarray
    variance_fraction: float

    @property
    def n_modes(self) -> int:
        return self.eigenvalues.size


def build_kle(points: np.ndarray, lengthscale: float,
              variance_target: float = 0.99) -> KLExpansion:
    """Dense eigendecomposition of the field covariance over `points`,
    truncated at the smallest mode count reaching `variance_target`."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[0] < 2:
        raise ValueError("need at least two points")
    if lengthscale <= 0.0:
        raise ValueError("lengthscale must be positive")
    if not 0.0 < variance_target <= 1.0:
        raise ValueError("variance_target must lie in (0, 1]")
    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    cov = np.exp(-d2 / (2.0 * lengthscale ** 2))
    eigvals, eigvecs = np.linalg.eigh(cov)
    eigvals = eigvals[::-1]
    eigvecs = eigvecs[:, ::-1]
    eigvals = np.clip(eigvals, 0.0, None)
    total = float(np.sum(eigvals))
    fractions = np.cumsum(eigvals) / total
    k = int(np.searchsorted(fractions, variance_target) + 1)
    k = min(k, eigvals.size)
    return KLExpansion(points=points,
                       eigenvalues=eigvals[:k],
                       modes=eigvecs[:, :k] * np.sqrt(eigvals[:k]),
                       variance_fraction=float(fractions[k - 1]))


def realize_field(kle: KLExpansion, x: np.ndarray) -> np.ndarray:
    """Log-normal field exp(sum_i x_i phi_i) at the expansion points."""
    x = np.asarray(x, dtype=float)
    if x.shape != (kle.n_modes,):
        raise ValueError(f"coefficient vector must have length {kle.n_modes}")
    return np.exp(kle.modes @ x)


@dataclass(frozen=True)
class DiffusionGrid:
    """Unit-square grid with per-cell diffusivity and Dirichlet-zero walls.

    `n_cells` cells per side means (n_cells + 1) nodes per side and
    (n_cells - 1)^2 interior nodes carrying unknowns.
    """

    n_cells: int
    diffusivity: np.ndarray

    def __post_init__(self):
        diff = np.asarray(self.diffusivity, dtype=float)
        object.__setattr__(self, "diffusivity", diff)
        if self.n_cells < 2:
            raise ValueError("need at least 2 cells per side")
        if diff.shape != (self.n_cells, self.n_cells):
            raise ValueError("diffusivity must be (n_cells, n_cells)")
        if not np.all(diff > 0.0):
            raise ValueError("diffusivity must be positive everywhere")

    @property
    def n_interior(self) -> int:
        return (self.n_cells - 1) ** 2


def cell_centers(n_cells: int) -> np.ndarray:
    """Cell-center coordinates of an n_cells x n_cells unit-square grid."""
    h = 1.0 / n_cells
    c = (np.arange(n_cells) + 0.5) * h
    xx, yy = np.meshgrid(c, c, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


def interior_nodes(n_cells: int) -> np.ndarray:
    """Interior node coordinates of the same grid."""
    h = 1.0 / n_cells
    c = np.arange(1, n_cells) * h
    xx, yy = np.meshgrid(c, c, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


def _solve_fd(diffusivity: np.ndarray, hx: float, hy: float,
              source) -> np.ndarray:
    """Five-point finite differences for div(D grad u) = source with u = 0
    on the boundary of a rectangular grid.

    `diffusivity` is per cell, shape (ncx, ncy); face coefficients are
    harmonic means of the two adjacent cells.  Returns u at the interior
    nodes, shape (ncx - 1, ncy - 1).
    """
    ncx, ncy = diffusivity.shape
    nix, niy = ncx - 1, ncy - 1
    n = nix * niy

    def harmonic(a, b):
        return 2.0 * a * b / (a + b)

    # interior node (i, j) -> nodes at ((i+1)*hx, (j+1)*hy), i in [0, nix)
    # west face of node (i, j) sits between cells (i, j) and (i, j+1)
    w_face = harmonic(diffusivity[:-1, :-1], diffusivity[:-1, 1:])   # (nix, niy)
    e_face = harmonic(diffusivity[1:, :-1], diffusivity[1:, 1:])
    s_face = harmonic(diffusivity[:-1, :-1], diffusivity[1:, :-1])
    n_face = harmonic(diffusivity[:-1, 1:], diffusivity[1:, 1:])

    cx = 1.0 / (hx * hx)
    cy = 1.0 / (hy * hy)
    diag = cx * (w_face + e_face) + cy * (s_face + n_face)

    idx = np.arange(n).reshape(nix, niy)
    rows = [idx.ravel()]
    cols = [idx.ravel()]
    data = [diag.ravel()]
    # east neighbours (i+1, j)
    rows.append(idx[:-1, :].ravel())
    cols.append(idx[1:, :].ravel())
    data.append((-cx * e_face[:-1, :]).ravel())
    rows.append(idx[1:, :].ravel())
    cols.append(idx[:-1, :].ravel())
    data.append((-cx * e_face[:-1, :]).ravel())
    # north neighbours (i, j+1)
    rows.append(idx[:, :-1].ravel())
    cols.append(idx[:, 1:].ravel())
    data.append((-cy * n_face[:, :-1]).ravel())
    rows.append(idx[:, 1:].ravel())
    cols.append(idx[:, :-1].ravel())
    data.append((-cy * n_face[:, :-1]).ravel())

    A = sparse.csc_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n))
    rhs = -np.broadcast_to(np.asarray(source, dtype=float), (nix, niy)).ravel()
    if n <= 400:
        u = np.linalg.solve(A.toarray(), rhs)
    else:
        u = sparse_linalg.spsolve(A, rhs)
    residual = np.linalg.norm(A @ u - rhs)
    if residual > 1e-10 * max(np.linalg.norm(rhs), 1.0):
        raise ArithmeticError(f"linear solve residual {residual:.2e} too large")
    return u.reshape(nix, niy)


def solve_diffusion(grid: DiffusionGrid, source=10.0) -> np.ndarray:
    """Solution values at the interior nodes, flattened.

    `source` may be a scalar or an array over the interior nodes (used by
    manufactured-solution checks).
    """
    h = 1.0 / grid.n_cells
    if np.ndim(source) > 0:
        source = np.asarray(source, dtype=float).reshape(
            grid.n_cells - 1, grid.n_cells - 1)
    return _solve_fd(grid.diffusivity, h, h, source).ravel()


def synthesize_observations(forward: Callable[[np.ndarray], np.ndarray],
                            true_x: np.ndarray, noise_variance: float,
                            seed: int) -> np.ndarray:
    """Forward-model output at `true_x` plus seeded iid Gaussian noise."""
    clean = np.asarray(forward(np.asarray(true_x, dtype=float)), dtype=float)
    if noise_variance < 0.0:
        raise ValueError("noise_variance must be non-negative")
    if noise_variance == 0.0:
        return clean
    rng = np.random.default_rng(seed)
    return clean + math.sqrt(noise_variance) * rng.standard_normal(clean.size)


def field_csv_rows(kle: KLExpansion, x: np.ndarray) -> list[list[float]]:
    """Plot-ready rows (cx, cy, diffusivity) of a field realization."""
    values = realize_field(kle, x)
    return [[float(p[0]), float(p[1]), float(v)]
            for p, v in zip(kle.points, values)]


def solution_csv_rows(n_cells: int, u: np.ndarray) -> list[list[float]]:
    """Plot-ready rows (cx, cy, u) of a solution at the interior nodes."""
    nodes = interior_nodes(n_cells)
    return [[float(p[0]), float(p[1]), float(v)]
            for p, v in zip(nodes, np.asarray(u, dtype=float).ravel())]


@dataclass(frozen=True)
class DiffusionSetup:
    """Diffusion inverse problem plus everything needed to reproduce it."""

    problem: InverseProblem
    kle: KLExpansion
    true_x: np.ndarray
    y_obs: np.ndarray
    n_cells: int
    noise_variance: float
    forward: Callable[[np.ndarray], np.ndarray]


def build_diffusion_problem(n_cells: int = 20, lengthscale: float = 0.2,
                            noise_variance: float = 1e-4,
                            variance_target: float = 0.99,
                            source: float = 10.0,
                            seed: int = 0) -> DiffusionSetup:
    """Assemble the diffusion inverse problem.

    The KL expansion of the log-diffusivity lives on the cell centers (the
    solver consumes one diffusivity per cell).  Observations are the
    solution at all interior nodes under a prior draw of the coefficients,
    with iid noise added.
    """
    kle = build_kle(cell_centers(n_cells), lengthscale, variance_target)
    k = kle.n_modes

    def forward(x):
        diff = realize_field(kle, x).reshape(n_cells, n_cells)
        return solve_diffusion(DiffusionGrid(n_cells, diff), source)

    rng = np.random.default_rng(seed)
    true_x = rng.standard_normal(k)
    y_obs = synthesize_observations(forward, true_x, noise_variance,
                                    seed=seed + 1)
    n_obs = (n_cells - 1) ** 2
    log_prior, sample = _standard_normal_prior(k)

    def log_likelihood(X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.empty(X.shape[0])
        for i, x in enumerate(X):
            misfit = y_obs - forward(x)
            out[i] = -0.5 * float(misfit @ misfit) / noise_variance
        return out

    problem = InverseProblem(
        name="diffusion", dim=k, n_obs=n_obs,
        log_prior=log_prior, sample_prior=sample,
        log_likelihood=log_likelihood, use_bound=True)
    return DiffusionSetup(problem=problem, kle=kle, true_x=true_x,
                          y_obs=y_obs, n_cells=n_cells,
                          noise_variance=noise_variance, forward=forward)
