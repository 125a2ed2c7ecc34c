"""GP regression tests: hand-derived values, dense-solve oracles, and
finite-difference gradient checks."""

import math

import numpy as np
import pytest

from gpinverse.gp import (CholeskyFailure, Hyperparameters, TrainingSet, fit,
                          kernel_eval, kernel_matrix, log_marginal_likelihood,
                          lml_gradient)


def _random_case(seed, n=6, d=3):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    f = rng.normal(size=n) * 2.0
    hyper = Hyperparameters(float(rng.uniform(0.5, 3.0)),
                            rng.uniform(0.5, 2.0, size=d),
                            float(rng.uniform(0.01, 0.2)))
    return TrainingSet(X, f), hyper


class TestTypes:
    def test_hyper_validation(self):
        with pytest.raises(ValueError):
            Hyperparameters(0.0, np.array([1.0]))
        with pytest.raises(ValueError):
            Hyperparameters(1.0, np.array([-1.0]))
        with pytest.raises(ValueError):
            Hyperparameters(1.0, np.array([1.0]), -0.1)

    def test_log_vector_round_trip(self):
        h = Hyperparameters(2.5, np.array([0.3, 1.7]), 1e-5)
        h2 = Hyperparameters.from_log_vector(h.to_log_vector())
        assert abs(h2.signal_variance - 2.5) < 1e-12
        np.testing.assert_allclose(h2.lengthscales, [0.3, 1.7])
        assert abs(h2.noise_variance - 1e-5) < 1e-18

    def test_training_set_rejects_duplicates(self):
        with pytest.raises(ValueError):
            TrainingSet(np.array([[1.0, 2.0], [1.0, 2.0]]), np.array([0.0, 1.0]))

    def test_training_set_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            TrainingSet(np.array([[1.0]]), np.array([math.inf]))

    def test_extension_preserves_prefix(self):
        t = TrainingSet(np.array([[0.0], [1.0]]), np.array([-1.0, -2.0]), -0.5)
        t2 = t.extended(np.array([[2.0]]), np.array([-3.0]))
        np.testing.assert_array_equal(t2.X[:2], t.X)
        np.testing.assert_array_equal(t2.f[:2], t.f)
        assert t2.upper_bound == -0.5


class TestKernel:
    def test_zero_distance(self):
        h = Hyperparameters(2.3, np.array([1.0, 1.0]))
        assert kernel_eval([0.5, -1.0], [0.5, -1.0], h) == pytest.approx(2.3)

    def test_hand_value(self):
        h = Hyperparameters(1.0, np.array([1.0]))
        assert kernel_eval([0.0], [math.sqrt(2.0)], h) == \
            pytest.approx(0.3678794412, abs=1e-10)

    def test_distance_limit(self):
        h = Hyperparameters(1.0, np.array([1.0]))
        assert kernel_eval([0.0], [50.0], h) < 1e-300

    def test_symmetry_and_psd(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(20, 2))
        h = Hyperparameters(1.7, np.array([0.8, 1.3]))
        K = kernel_matrix(h, X)
        np.testing.assert_array_equal(K, K.T)
        eigs = np.linalg.eigvalsh(K)
        assert eigs.min() >= -1e-10 * h.signal_variance

    def test_dimension_mismatch(self):
        h = Hyperparameters(1.0, np.array([1.0, 1.0]))
        with pytest.raises(ValueError):
            kernel_eval([0.0], [1.0], h)


class TestFitPredict:
    def test_single_point_alpha(self):
        g = fit(TrainingSet([[0.0]], [-1.0]),
                Hyperparameters(1.0, np.array([1.0]), 0.0))
        np.testing.assert_allclose(g.alpha, [-1.0])

    def test_interpolation_at_training_points(self):
        train, hyper = _random_case(7)
        hyper = Hyperparameters(hyper.signal_variance, hyper.lengthscales, 0.0)
        g = fit(train, hyper)
        mean, var = g.predict(train.X)
        np.testing.assert_allclose(mean, train.f, atol=1e-8)
        assert np.max(var) < 1e-8

    def test_alpha_matches_dense_solve_oracle(self):
        train, hyper = _random_case(12, n=3)
        K = kernel_matrix(hyper, train.X) + hyper.noise_variance * np.eye(3)
        alpha_oracle = np.linalg.solve(K, train.f)
        g = fit(train, hyper)
        np.testing.assert_allclose(g.alpha, alpha_oracle, rtol=1e-10)

    def test_hand_derived_prediction(self):
        g = fit(TrainingSet([[0.0]], [-1.0]),
                Hyperparameters(1.0, np.array([1.0]), 0.0))
        mean, var = g.predict(np.array([1.0]))
        assert mean == pytest.approx(-math.exp(-0.5), abs=1e-12)
        assert var == pytest.approx(1.0 - math.exp(-1.0), abs=1e-12)

    def test_prior_recovery_far_away(self):
        train, hyper = _random_case(3)
        g = fit(train, hyper)
        mean, var = g.predict(np.full(train.dim, 100.0))
        assert abs(mean) < 1e-6
        assert abs(var - hyper.signal_variance) < 1e-6

    def test_variance_bounds(self):
        train, hyper = _random_case(9, n=12)
        g = fit(train, hyper)
        rng = np.random.default_rng(0)
        _, var = g.predict(rng.normal(size=(300, train.dim)))
        assert np.all(var >= 0.0)
        assert np.all(var <= hyper.signal_variance + 1e-12)

    def test_exchangeability(self):
        train, hyper = _random_case(15, n=10)
        perm = np.random.default_rng(1).permutation(10)
        shuffled = TrainingSet(train.X[perm], train.f[perm], train.upper_bound)
        Xq = np.random.default_rng(2).normal(size=(20, train.dim))
        m1, v1 = fit(train, hyper).predict(Xq)
        m2, v2 = fit(shuffled, hyper).predict(Xq)
        np.testing.assert_allclose(m1, m2, atol=1e-10)
        np.testing.assert_allclose(v1, v2, atol=1e-10)

    def test_near_duplicates_trigger_jitter(self):
        X = np.array([[0.0], [1e-14]])
        g = fit(TrainingSet(X, np.array([0.0, 1.0])),
                Hyperparameters(1.0, np.array([10.0]), 0.0))
        assert g.jitter > 0.0

    def test_cholesky_failure_surfaces(self, monkeypatch):
        # force every factorization attempt to fail: the jitter ladder must
        # escalate and then raise CholeskyFailure instead of looping or
        # crashing with a bare LinAlgError
        def always_fail(*args, **kwargs):
            raise np.linalg.LinAlgError("forced")

        monkeypatch.setattr(np.linalg, "cholesky", always_fail)
        train, hyper = _random_case(50)
        with pytest.raises(CholeskyFailure):
            fit(train, hyper)

    def test_factor_reconstruction(self):
        train, hyper = _random_case(21, n=8)
        g = fit(train, hyper)
        K = kernel_matrix(hyper, train.X) + hyper.noise_variance * np.eye(8)
        np.testing.assert_allclose(g.L @ g.L.T, K, rtol=1e-8)
        assert np.all(np.diag(g.L) > 0.0)


class TestLogMarginalLikelihood:
    def test_single_point_closed_form(self):
        value = log_marginal_likelihood(
            TrainingSet([[0.0]], [0.0]), Hyperparameters(1.0, np.array([1.0])))
        assert value == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)

    def test_two_point_closed_form_oracle(self):
        train = TrainingSet(np.array([[0.0], [1.0]]), np.array([0.3, -0.2]))
        hyper = Hyperparameters(1.5, np.array([0.9]), 0.1)
        K = kernel_matrix(hyper, train.X) + 0.1 * np.eye(2)
        oracle = (-0.5 * train.f @ np.linalg.solve(K, train.f)
                  - 0.5 * math.log(np.linalg.det(K)) - math.log(2 * math.pi))
        assert log_marginal_likelihood(train, hyper) == \
            pytest.approx(oracle, abs=1e-12)

    def test_misfit_quadratic_form_decreases_with_noise(self):
        # f' (K + noise I)^-1 f is monotone decreasing in the noise
        train, hyper = _random_case(30, n=8)
        quads = []
        for noise in (0.01, 0.1, 1.0, 10.0):
            h = Hyperparameters(hyper.signal_variance, hyper.lengthscales, noise)
            g = fit(train, h)
            quads.append(float(train.f @ g.alpha))
        assert all(b < a for a, b in zip(quads, quads[1:]))


class TestGradient:
    def test_matches_finite_differences(self):
        for seed in range(5):
            train, hyper = _random_case(100 + seed)
            grad = lml_gradient(train, hyper)
            v0 = hyper.to_log_vector()
            h = 1e-5
            for j in range(v0.size):
                e = np.zeros_like(v0)
                e[j] = h
                up = log_marginal_likelihood(
                    train, Hyperparameters.from_log_vector(v0 + e))
                dn = log_marginal_likelihood(
                    train, Hyperparameters.from_log_vector(v0 - e))
                fd = (up - dn) / (2 * h)
                assert abs(grad[j] - fd) <= 1e-4 * max(abs(fd), 1.0)

    def test_zero_data_fit_gradient(self):
        train = TrainingSet(np.array([[0.0], [1.5]]), np.array([0.0, 0.0]))
        hyper = Hyperparameters(2.0, np.array([1.0]), 0.1)
        g = fit(train, hyper)
        # alpha = 0, so the data-fit part of every derivative vanishes;
        # what remains is -1/2 tr(K^-1 dK)
        K = kernel_matrix(hyper, train.X) + 0.1 * np.eye(2)
        expected_sig = -0.5 * np.trace(
            np.linalg.solve(K, kernel_matrix(hyper, train.X)))
        grad = lml_gradient(train, hyper, gp=g)
        assert grad[0] == pytest.approx(expected_sig, abs=1e-10)

    def test_single_point_scalar_calculus(self):
        # N=1: lml = -f^2/(2(s+n)) - log(s+n)/2 - log(2 pi)/2 with
        # s = signal variance, n = noise variance
        f0, s, n = -2.0, 1.3, 0.4
        train = TrainingSet([[0.0]], [f0])
        hyper = Hyperparameters(s, np.array([1.0]), n)
        total = s + n

        def d_dtotal():
            return f0 * f0 / (2 * total * total) - 1.0 / (2 * total)

        grad = lml_gradient(train, hyper)
        assert grad[0] == pytest.approx(d_dtotal() * s, abs=1e-12)
        assert grad[2] == pytest.approx(d_dtotal() * n, abs=1e-12)
        assert grad[1] == pytest.approx(0.0, abs=1e-12)
