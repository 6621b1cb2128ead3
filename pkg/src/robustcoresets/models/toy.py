"""Finite-grid model whose weighted posterior, normalizer, KL objective and
KL gradient are all exactly enumerable.

The grid posterior family pi_w(theta_j) proportional to
pi0(theta_j) * exp(sum_n w_n F[j, n]) is an exponential family with natural
parameters w and sufficient statistics F[., n], which makes this model the
ground-truth oracle for the builder's Monte Carlo machinery.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from ..data import Dataset
from ..exceptions import ModelError


@dataclass(frozen=True)
class ToyExact:
    """Exact quantities at a weight vector w.

    Attributes:
        masses: posterior probabilities over the grid.
        log_z: log normalizer log Z(w).
        kl_to_full: KL(pi_w || pi_1) against the unit-weight posterior.
        grad: gradient of that KL wrt every weight,
            -Cov_w[f_n, (1 - w)^T f] componentwise.
    """

    masses: np.ndarray
    log_z: float
    kl_to_full: float
    grad: np.ndarray


class DiscreteToyModel:
    """Grid prior pi0 over J parameter values and a J x N table of f values."""

    def __init__(self, prior, table):
        prior = np.asarray(prior, dtype=float)
        table = np.asarray(table, dtype=float)
        if prior.ndim != 1 or np.any(prior <= 0):
            raise ModelError("prior masses must be positive")
        if not np.isclose(prior.sum(), 1.0, atol=1e-8):
            raise ModelError("prior masses must sum to 1")
        if table.ndim != 2 or table.shape[0] != prior.shape[0]:
            raise ModelError("table must be J x N with J matching the prior")
        if table.size > 10**6:
            raise ModelError("table too large to enumerate")
        if not np.all(np.isfinite(table)):
            raise ModelError("table entries must be finite")
        self.prior = prior / prior.sum()
        self.table = table
        self.log_prior = np.log(self.prior)

    @property
    def n_points(self) -> int:
        return self.table.shape[1]

    def as_dataset(self) -> Dataset:
        """Placeholder Dataset so the builder can draw minibatches of indices."""
        return Dataset(features=np.zeros((self.n_points, 1)))

    def _log_masses(self, w_full):
        logits = self.log_prior + self.table @ w_full
        log_z = logsumexp(logits)
        return logits - log_z, log_z

    def exact(self, w_full) -> ToyExact:
        """Enumerated posterior, normalizer, KL to the w=1 posterior, and gradient."""
        w_full = np.asarray(w_full, dtype=float)
        if w_full.shape != (self.n_points,):
            raise ModelError(f"w must have length {self.n_points}")
        log_m, log_z = self._log_masses(w_full)
        log_m1, _ = self._log_masses(np.ones(self.n_points))
        masses = np.exp(log_m)
        kl = float(masses @ (log_m - log_m1))
        residual = self.table @ (1.0 - w_full)
        mean_f = masses @ self.table
        mean_residual = masses @ residual
        grad = -((masses * residual) @ self.table - mean_residual * mean_f)
        return ToyExact(masses=masses, log_z=float(log_z), kl_to_full=kl, grad=grad)

    def full_weight_vector(self, indices, weights):
        w_full = np.zeros(self.n_points)
        w_full[np.asarray(indices, dtype=int)] = np.asarray(weights, dtype=float)
        return w_full

    def f_matrix(self, ds, indices, thetas, beta):
        """Table lookup; `thetas` are grid indices sampled by sample_posterior."""
        grid = np.asarray(thetas, dtype=int).reshape(-1)
        return self.table[np.ix_(grid, np.asarray(indices, dtype=int))]

    def sample_posterior(self, ds, indices, weights, n_samples, rng, *, beta=None, cache=None):
        masses = self.exact(self.full_weight_vector(indices, weights)).masses
        return rng.choice(self.prior.shape[0], size=n_samples, p=masses)
