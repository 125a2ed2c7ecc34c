"""Bayesian inverse problems with bounded GP likelihood surrogates.

The package approximates an expensive unnormalized log-likelihood with a
Gaussian process that is constrained by an upper bound derived from the
noise statistics, propagates the surrogate uncertainty into the posterior
through quantiles of the transformed predictive distribution, and selects
training points adaptively by sampling intermediate SMC posteriors.
"""

from .adaptive import (AdaptiveConfig, AdaptiveRunFailure, RunRecord,
                       fit_estimator, run_adaptive, run_reference,
                       select_new_points)
from .bounded import (CFBGP, CGPMAP_II, GPMAP_I, EstimatorMode,
                      LikelihoodEstimator, TruncatedNormal,
                      constrained_predict, estimate_log_likelihood,
                      likelihood_cdf, mixture_quantile,
                      truncated_normal_quantile, update_bound,
                      upper_bound_estimate)
from .diagnostics import (GaussianMixture1D, GaussianMoments, cs_divergence,
                          gaussian_kl, kde_1d, max_marginal_cs,
                          moments_from_ensemble)
from .gp import (CholeskyFailure, FittedGP, Hyperparameters, TrainingSet,
                 fit, kernel_eval, kernel_matrix, log_marginal_likelihood,
                 lml_gradient)
from .hyper import (HyperPosteriorSamples, HyperPrior, log_unnorm_posterior,
                    map_estimate, sample_posterior)
from .problems import (DiffusionGrid, DiffusionSetup, InverseProblem,
                       KLExpansion, build_diffusion_problem, build_kle,
                       energy_target, gaussian_benchmark, realize_field,
                       solve_diffusion, synthesize_observations)
from .smc import (DegenerateEnsemble, ParticleEnsemble, SMCConfig, SMCResult,
                  ess, run_smc, systematic_resample)

__version__ = "0.1.0"
