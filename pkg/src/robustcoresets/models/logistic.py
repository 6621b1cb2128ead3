"""Bayesian logistic regression with Laplace-approximated weighted posteriors.

Labels live in {-1, +1} and each datapoint is embedded as z_n = [x_n; 1].
All likelihood quantities are evaluated in the log domain, so logits up to
|z^T theta| ~ 1e3 stay finite.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.optimize import minimize

from ..exceptions import ConvergenceError, ModelError
from .gaussian import _spd_cholesky


def _softplus(t):
    # log(1 + exp(t)) = max(t, 0) + log1p(exp(-|t|))
    return np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))


def _log_sigmoid(t):
    return -_softplus(-t)


class LogisticModel:
    """Logistic likelihood on embedded inputs with a Gaussian prior on theta."""

    def __init__(self, mu0, Sigma0):
        self.mu0 = np.atleast_1d(np.asarray(mu0, dtype=float))
        self.Sigma0, self._chol0 = _spd_cholesky(Sigma0, "Sigma0")
        if self.Sigma0.shape[0] != self.mu0.shape[0]:
            raise ModelError("mu0 and Sigma0 dimensions disagree")
        self.dim = self.mu0.shape[0]
        self._Sigma0_inv = np.linalg.inv(self.Sigma0)

    def embed(self, features):
        z = np.hstack([features, np.ones((features.shape[0], 1))])
        if z.shape[1] != self.dim:
            raise ModelError(f"model expects {self.dim - 1} features, got {features.shape[1]}")
        return z

    def _parts(self, ds, indices):
        indices = np.asarray(indices, dtype=int)
        if ds.labels is None:
            raise ModelError("logistic model requires labels")
        return self.embed(ds.features[indices]), ds.labels[indices]

    def f_matrix(self, ds, indices, thetas, beta):
        """Entry (s, j): density-power term (or log-likelihood) of point j at theta_s."""
        z, y = self._parts(ds, indices)
        thetas = np.atleast_2d(thetas)
        t = thetas @ z.T
        log_p = _log_sigmoid(y[None, :] * t)
        if beta.classical:
            return log_p
        b = beta.beta
        # sum over both labels of pi(y|x,theta)^(1+beta)
        integral = np.exp((1.0 + b) * _log_sigmoid(t)) + np.exp((1.0 + b) * _log_sigmoid(-t))
        return np.exp(b * log_p) / b - integral / (1.0 + b)

    def beta_f(self, x, y, theta, beta) -> float:
        from .gaussian import _OnePoint

        ds = _OnePoint(x)
        ds.labels = np.atleast_1d(np.asarray(y, dtype=float))
        return float(self.f_matrix(ds, [0], np.atleast_2d(theta), beta)[0, 0])

    def _point_grad_coeff(self, t, y, beta):
        # d f_n / d theta = coeff_n * z_n
        ls_pos, ls_neg = _log_sigmoid(t), _log_sigmoid(-t)
        log_p = np.where(y > 0, ls_pos, ls_neg)
        log_q = np.where(y > 0, ls_neg, ls_pos)
        if beta.classical:
            return y * np.exp(log_q)
        b = beta.beta
        return y * np.exp(b * log_p + log_q) - (
            np.exp((1.0 + b) * ls_pos + ls_neg) - np.exp((1.0 + b) * ls_neg + ls_pos)
        )

    def log_joint_and_grad(self, ds, indices, weights, theta, beta):
        """Weighted objective log pi0(theta) + sum_n w_n f_n(theta) and its gradient."""
        theta = np.asarray(theta, dtype=float)
        diff = theta - self.mu0
        prior_grad = -self._Sigma0_inv @ diff
        value = -0.5 * diff @ (self._Sigma0_inv @ diff)
        grad = prior_grad
        if len(indices):
            z, y = self._parts(ds, indices)
            w = np.asarray(weights, dtype=float)
            t = z @ theta
            fvals = self.f_matrix(ds, indices, theta[None, :], beta)[0]
            value += w @ fvals
            grad = prior_grad + (w * self._point_grad_coeff(t, y, beta)) @ z
        return value, grad

    def laplace_mode(self, ds, indices, weights, beta, init=None, max_iter=500, grad_tol=1e-4):
        """Mode of the weighted objective, found by quasi-Newton ascent.

        The convergence tolerance scales with the total weight mass, since
        the objective (and so the gradient at any fixed distance from the
        mode) grows linearly in the weights. Raises ConvergenceError
        carrying the last gradient norm if the optimizer stalls above it.
        """
        theta0 = self.mu0 if init is None else np.asarray(init, dtype=float)
        tol = grad_tol * (1.0 + float(np.sum(np.abs(weights))))

        def neg(theta):
            value, grad = self.log_joint_and_grad(ds, indices, weights, theta, beta)
            return -value, -grad

        res = minimize(neg, theta0, jac=True, method="L-BFGS-B",
                       options={"maxiter": max_iter, "ftol": 1e-14, "gtol": 1e-10})
        if max_iter > 0 and np.all(np.isfinite(res.x)) and np.linalg.norm(res.jac) > tol:
            # one restart clears stale curvature memory after a stalled line search
            res = minimize(neg, res.x, jac=True, method="L-BFGS-B",
                           options={"maxiter": max_iter, "ftol": 1e-14, "gtol": 1e-10})
        grad_norm = float(np.linalg.norm(res.jac))
        if not np.all(np.isfinite(res.x)) or grad_norm > tol:
            raise ConvergenceError(
                f"mode search stopped with gradient norm {grad_norm:.3e} (tolerance {tol:.3e})",
                grad_norm=grad_norm,
            )
        return res.x

    def laplace_precision(self, ds, indices, weights, theta_star, beta):
        """Negative Hessian at the mode via central differences of the gradient."""
        p = theta_star.shape[0]
        hess = np.empty((p, p))
        for i in range(p):
            h = 1e-5 * (1.0 + abs(theta_star[i]))
            up = theta_star.copy()
            up[i] += h
            dn = theta_star.copy()
            dn[i] -= h
            _, g_up = self.log_joint_and_grad(ds, indices, weights, up, beta)
            _, g_dn = self.log_joint_and_grad(ds, indices, weights, dn, beta)
            hess[:, i] = (g_up - g_dn) / (2.0 * h)
        return -0.5 * (hess + hess.T)

    def sample_posterior(self, ds, indices, weights, n_samples, rng, *, beta=None, cache=None):
        """Laplace-approximate draws from the weighted posterior.

        A dict passed as `cache` persists the last mode between calls and is
        used to warm-start the next mode search.
        """
        if beta is None:
            raise ModelError("logistic sampling requires a BetaConfig")
        init = cache.get("mode") if cache is not None else None
        theta_star = self.laplace_mode(ds, indices, weights, beta, init=init)
        if cache is not None:
            cache["mode"] = theta_star
        precision = self.laplace_precision(ds, indices, weights, theta_star, beta)
        try:
            chol_p = cholesky(precision, lower=True)
        except np.linalg.LinAlgError:
            try:
                chol_p = cholesky(precision + 1e-6 * np.eye(self.dim), lower=True)
            except np.linalg.LinAlgError:
                raise ModelError(
                    "Laplace precision is not positive definite even after 1e-6 jitter; "
                    "increase the jitter or check the objective"
                ) from None
        noise = rng.standard_normal((self.dim, n_samples))
        return theta_star + solve_triangular(chol_p, noise, lower=True, trans="T").T


def laplace_sample(model: LogisticModel, ds, indices, weights, beta, n_samples, seed, init=None):
    """Stateless Laplace sampling: deterministic given (weights, seed)."""
    rng = np.random.default_rng(seed)
    cache = {"mode": init} if init is not None else None
    return model.sample_posterior(ds, indices, weights, n_samples, rng, beta=beta, cache=cache)
