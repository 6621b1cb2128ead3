"""Multivariate normal mean model with known covariance.

Weighted posteriors are conjugate, so construction-time sampling draws from
the exact weighted Gaussian update rather than an approximation.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky, solve_triangular

from ..exceptions import ModelError


def _spd_cholesky(mat, name):
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    if mat.shape[0] != mat.shape[1]:
        raise ModelError(f"{name} must be square, got shape {mat.shape}")
    if not np.allclose(mat, mat.T, atol=1e-10):
        raise ModelError(f"{name} must be symmetric")
    try:
        return mat, cholesky(mat, lower=True)
    except np.linalg.LinAlgError:
        raise ModelError(f"{name} is not positive definite") from None


class GaussianModel:
    """N(theta, Sigma) likelihood with N(mu0, Sigma0) prior on the mean."""

    def __init__(self, mu0, Sigma0, Sigma):
        self.mu0 = np.atleast_1d(np.asarray(mu0, dtype=float))
        self.Sigma0, self._chol0 = _spd_cholesky(Sigma0, "Sigma0")
        self.Sigma, self._chol = _spd_cholesky(Sigma, "Sigma")
        d = self.mu0.shape[0]
        if self.Sigma0.shape != (d, d) or self.Sigma.shape != (d, d):
            raise ModelError("mu0, Sigma0 and Sigma dimensions disagree")
        self.dim = d
        eye = np.eye(d)
        self._Sigma0_inv = cho_solve((self._chol0, True), eye)
        self._Sigma_inv = cho_solve((self._chol, True), eye)
        # log of the normalizer (2 pi)^(-d/2) |Sigma|^(-1/2)
        self._log_norm = -0.5 * d * np.log(2.0 * np.pi) - np.log(np.diag(self._chol)).sum()

    def _sq_mahalanobis(self, points, thetas):
        # ||L^-1 (x - theta)||^2 for every (theta, x) pair, via one matmul
        a = solve_triangular(self._chol, points.T, lower=True).T
        b = solve_triangular(self._chol, thetas.T, lower=True).T
        return (
            (a * a).sum(axis=1)[None, :]
            + (b * b).sum(axis=1)[:, None]
            - 2.0 * b @ a.T
        )

    def f_matrix(self, ds, indices, thetas, beta):
        """Likelihood-term matrix with entry (s, j) = f_{indices[j]}(thetas[s])."""
        points = ds.features[np.asarray(indices, dtype=int)]
        thetas = np.atleast_2d(thetas)
        q = self._sq_mahalanobis(points, thetas)
        if beta.classical:
            return self._log_norm - 0.5 * q
        b = beta.beta
        scale = np.exp(b * self._log_norm)
        integral = scale * (1.0 + b) ** (-0.5 * self.dim)
        return scale * np.exp(-0.5 * b * q) / b - integral / (1.0 + b)

    def beta_f(self, x, theta, beta) -> float:
        """Single-point evaluation of the density-power likelihood term."""
        return float(self.f_matrix(_OnePoint(x), [0], np.atleast_2d(theta), beta)[0, 0])

    def weighted_posterior(self, ds, indices, weights):
        """Conjugate update for the weighted subset.

        Returns (mean, covariance) of the Gaussian posterior with precision
        Sigma0^-1 + (sum_n w_n) Sigma^-1.
        """
        indices = np.asarray(indices, dtype=int)
        weights = np.asarray(weights, dtype=float)
        if np.any(weights < 0):
            raise ModelError("weights must be nonnegative")
        total = weights.sum()
        weighted_sum = weights @ ds.features[indices] if len(indices) else np.zeros(self.dim)
        precision = self._Sigma0_inv + total * self._Sigma_inv
        chol_p = cholesky(precision, lower=True)
        cov = cho_solve((chol_p, True), np.eye(self.dim))
        mean = cho_solve((chol_p, True), self._Sigma0_inv @ self.mu0 + self._Sigma_inv @ weighted_sum)
        return mean, cov

    def sample_posterior(self, ds, indices, weights, n_samples, rng, *, beta=None, cache=None):
        """Draw n_samples from the exact weighted conjugate posterior.

        The weighted density-power posterior of a Gaussian is not itself
        Gaussian; construction and evaluation both condition the classical
        conjugate posterior on the weighted summary, so `beta` is unused.
        """
        mean, cov = self.weighted_posterior(ds, indices, weights)
        chol_c = cholesky(cov, lower=True)
        return mean + rng.standard_normal((n_samples, self.dim)) @ chol_c.T


class _OnePoint:
    """Minimal Dataset stand-in for scalar f evaluations."""

    def __init__(self, x):
        self.features = np.atleast_2d(np.asarray(x, dtype=float))
