"""Neural linear model: closed-form last-layer posterior against a dense
solve oracle, predictive moments against Monte Carlo, feature-map training
gradients against finite differences."""

import numpy as np
import pytest

from robustcoresets.data import Dataset
from robustcoresets.exceptions import ConvergenceError
from robustcoresets.models import BetaConfig, MLPFeatureMap, NeuralLinearModel, mlp_train

INT_SQUARED_NORMAL = 0.2820947917738778  # quadrature value of int N(x;0,1)^2 dx


def _identity_model(h=2, **kwargs):
    """Feature map acting as the identity on the nonnegative orthant."""
    params = {"W1": np.eye(h), "b1": np.zeros(h), "W2": np.eye(h), "b2": np.zeros(h),
              "w3": np.zeros(h), "b3": np.zeros(1)}
    return NeuralLinearModel(feature_map=MLPFeatureMap(params=params), **kwargs)


def _random_model(d, h, seed, **kwargs):
    rng = np.random.default_rng(seed)
    return NeuralLinearModel.create(d, h, rng, **kwargs)


class TestBetaTerm:
    def test_zero_residual_matches_quadrature_oracle(self):
        model = _identity_model()
        # y = theta^T z exactly, sigma = 1, beta = 1
        ds = Dataset(features=np.array([[1.0, 0.0]]), labels=np.array([2.0]))
        f = model.f_matrix(ds, [0], np.array([[2.0, 0.0]]), BetaConfig(1.0))[0, 0]
        expected = 1.0 / np.sqrt(2 * np.pi) - 0.5 * INT_SQUARED_NORMAL
        assert np.isclose(f, expected, atol=1e-12)

    def test_large_residual_floor(self):
        model = _identity_model()
        beta = 0.3
        ds = Dataset(features=np.array([[1.0, 0.0]]), labels=np.array([1e6]))
        f = model.f_matrix(ds, [0], np.zeros((1, 2)), BetaConfig(beta))[0, 0]
        floor = -((2 * np.pi) ** (-beta / 2)) * (1 + beta) ** -1.5
        assert np.isclose(f, floor, atol=1e-12)

    def test_classical_mode_drops_constants(self):
        model = _identity_model()
        ds = Dataset(features=np.array([[1.0, 0.0]]), labels=np.array([2.0]))
        f = model.f_matrix(ds, [0], np.zeros((1, 2)), BetaConfig.classical_mode())[0, 0]
        assert np.isclose(f, -2.0)

    def test_beta_limit_matches_log_likelihood_differences(self):
        # tolerance applies where the density stays in [0.1, 0.9]; with
        # sigma=1 that bounds the residual magnitude by ~1.67
        model = _random_model(3, 8, seed=0)
        small, classical = BetaConfig(1e-4), BetaConfig.classical_mode()
        rng = np.random.default_rng(1)
        ds = Dataset(features=rng.standard_normal((50, 3)), labels=rng.standard_normal(50))
        thetas = 0.3 * rng.standard_normal((20, 8))
        f_classical = model.f_matrix(ds, np.arange(50), thetas, classical)
        density = np.exp(f_classical) / np.sqrt(2 * np.pi)
        keep = density >= 0.1
        assert keep.sum() > 100
        f_small = model.f_matrix(ds, np.arange(50), thetas, small)
        for s in range(20):
            cols = np.flatnonzero(keep[s])
            if len(cols) < 2:
                continue
            diff_small = f_small[s, cols] - f_small[s, cols[0]]
            diff_classical = f_classical[s, cols] - f_classical[s, cols[0]]
            assert np.max(np.abs(diff_small - diff_classical)) < 1e-3


class TestBlrPosterior:
    def test_empty_support_is_prior(self):
        model = _identity_model(sigma0=2.0)
        ds = Dataset(features=np.zeros((1, 2)), labels=np.zeros(1))
        mu, cov = model.blr_posterior(ds, [], [])
        assert np.allclose(mu, 0.0)
        assert np.allclose(cov, 4.0 * np.eye(2))

    def test_rank_one_update_by_hand(self):
        model = _identity_model()
        ds = Dataset(features=np.array([[1.0, 0.0]]), labels=np.array([1.0]))
        mu, cov = model.blr_posterior(ds, [0], [1.0])
        assert np.allclose(cov, np.diag([0.5, 1.0]))
        assert np.allclose(mu, [0.5, 0.0])

    def test_matches_dense_solve_oracle(self):
        model = _random_model(4, 6, seed=2, sigma=0.7, sigma0=1.3)
        rng = np.random.default_rng(3)
        ds = Dataset(features=rng.standard_normal((20, 4)), labels=rng.standard_normal(20))
        w = rng.uniform(0, 3, 20)
        mu, cov = model.blr_posterior(ds, np.arange(20), w)
        z = model.features(ds.features)
        prec = np.eye(6) / 1.3**2 + (z.T * w) @ z / 0.7**2
        cov_ref = np.linalg.inv(prec)
        mu_ref = cov_ref @ ((w * ds.labels) @ z / 0.7**2)
        assert np.allclose(cov, cov_ref, atol=1e-9)
        assert np.allclose(mu, mu_ref, atol=1e-9)


class TestPredictive:
    def test_dead_features_give_prior_noise_variance(self):
        model = _identity_model(sigma=1.5)
        ds = Dataset(features=np.array([[1.0, 1.0]]), labels=np.array([0.3]))
        posterior = model.blr_posterior(ds, [0], [2.0])
        mean, var = model.predictive(posterior, np.array([[-1.0, -1.0]]))
        assert mean[0] == 0.0
        assert np.isclose(var[0], 1.5**2)

    def test_prior_predictive_hand_case(self):
        model = _identity_model(sigma=1.0, sigma0=2.0)
        ds = Dataset(features=np.zeros((1, 2)), labels=np.zeros(1))
        posterior = model.blr_posterior(ds, [], [])
        mean, var = model.predictive(posterior, np.array([[1.0, 0.0]]))
        assert np.isclose(mean[0], 0.0)
        assert np.isclose(var[0], 1.0 + 4.0)

    def test_monte_carlo_oracle(self):
        model = _random_model(3, 5, seed=4, sigma=0.8)
        rng = np.random.default_rng(5)
        ds = Dataset(features=rng.standard_normal((15, 3)), labels=rng.standard_normal(15))
        posterior = model.blr_posterior(ds, np.arange(15), np.ones(15))
        x_t = rng.standard_normal((1, 3))
        mean, var = model.predictive(posterior, x_t)
        draws = 10**5
        thetas = model.sample_posterior(ds, np.arange(15), np.ones(15), draws,
                                        np.random.default_rng(6))
        z_t = model.features(x_t)[0]
        ys = thetas @ z_t + 0.8 * np.random.default_rng(7).standard_normal(draws)
        se_mean = ys.std(ddof=1) / np.sqrt(draws)
        assert abs(ys.mean() - mean[0]) < 3 * se_mean
        se_var = ys.var(ddof=1) * np.sqrt(2.0 / (draws - 1))
        assert abs(ys.var(ddof=1) - var[0]) < 3 * se_var


class TestTraining:
    def _regression(self, n=60, d=4, seed=8, constant=None):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((n, d))
        y = np.full(n, constant) if constant is not None else rng.standard_normal(n)
        return Dataset(features=x, labels=y)

    def test_loss_drops_on_constant_targets(self):
        ds = self._regression(constant=3.0)
        model = _random_model(4, 10, seed=9, train_steps=1000)
        before = model.training_loss(ds, np.arange(ds.n), np.ones(ds.n))
        trained = mlp_train(model, ds, np.arange(ds.n), np.ones(ds.n), 1000,
                            np.random.default_rng(10))
        after = trained.training_loss(ds, np.arange(ds.n), np.ones(ds.n))
        assert after < before

    def test_zero_steps_leave_map_unchanged(self):
        ds = self._regression()
        model = _random_model(4, 6, seed=11)
        trained = mlp_train(model, ds, np.arange(ds.n), np.ones(ds.n), 0,
                            np.random.default_rng(12))
        assert np.array_equal(model.features(ds.features), trained.features(ds.features))

    def test_loss_linear_in_weights(self):
        ds = self._regression()
        model = _random_model(4, 6, seed=13)
        w = np.random.default_rng(14).uniform(0, 2, ds.n)
        single = model.training_loss(ds, np.arange(ds.n), w)
        double = model.training_loss(ds, np.arange(ds.n), 2.0 * w)
        assert np.isclose(double, 2.0 * single, rtol=1e-12)

    def test_original_model_not_mutated_by_training(self):
        ds = self._regression()
        model = _random_model(4, 6, seed=15)
        z_before = model.features(ds.features).copy()
        mlp_train(model, ds, np.arange(ds.n), np.ones(ds.n), 50, np.random.default_rng(16))
        assert np.array_equal(model.features(ds.features), z_before)

    def test_divergent_loss_raises(self):
        ds = self._regression()
        model = _random_model(4, 6, seed=17, learning_rate=1e160)
        with np.errstate(over="ignore"), pytest.raises(ConvergenceError):
            mlp_train(model, ds, np.arange(ds.n), np.ones(ds.n), 5,
                      np.random.default_rng(18))

    @pytest.mark.parametrize("batchnorm", [False, True])
    def test_backward_matches_finite_differences(self, batchnorm):
        rng = np.random.default_rng(19)
        fmap = MLPFeatureMap.init(3, 5, rng, use_batchnorm=batchnorm)
        x = rng.standard_normal((8, 3))
        y = rng.standard_normal(8)
        w = rng.uniform(0.5, 1.5, 8)

        def loss_at(params):
            probe = MLPFeatureMap(params={k: v.copy() for k, v in params.items()},
                                  use_batchnorm=batchnorm)
            _, yhat = probe.forward(x, train=True)
            r = y - yhat
            return w @ (r * r)

        caches = {}
        work = fmap.copy()
        _, yhat = work.forward(x, train=True, caches=caches)
        grads = work.backward(-2.0 * w * (y - yhat), caches)
        for key, grad in grads.items():
            flat = fmap.params[key].reshape(-1)
            fd = np.empty_like(flat)
            for i in range(flat.size):
                h = 1e-6 * (1.0 + abs(flat[i]))
                for sign, store in ((1, "up"), (-1, "dn")):
                    probe = {k: v.copy() for k, v in fmap.params.items()}
                    probe[key].reshape(-1)[i] += sign * h
                    if sign == 1:
                        up = loss_at(probe)
                    else:
                        dn = loss_at(probe)
                fd[i] = (up - dn) / (2 * h)
            assert np.max(np.abs(grad.reshape(-1) - fd) / (1.0 + np.abs(fd))) < 1e-4, key
