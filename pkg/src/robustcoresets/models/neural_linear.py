"""Neural linear regression: a deterministic MLP feature map with exact
Bayesian linear regression on the last hidden layer.

The feature extractor is a two-hidden-layer ReLU network (optional batch
normalization) trained by minibatch AdaGrad on the weighted squared error of
the current coreset. The regression head used during training is separate
from the Bayesian last layer, whose posterior is computed in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky

from ..exceptions import ConvergenceError, ModelError

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.9


@dataclass
class MLPFeatureMap:
    """Parameters and running statistics of the feature extractor."""

    params: dict
    use_batchnorm: bool = False

    @staticmethod
    def init(in_dim, hidden, rng, use_batchnorm=False) -> "MLPFeatureMap":
        def he(fan_in, shape):
            return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)

        params = {
            "W1": he(in_dim, (in_dim, hidden)), "b1": np.zeros(hidden),
            "W2": he(hidden, (hidden, hidden)), "b2": np.zeros(hidden),
            "w3": he(hidden, (hidden,)), "b3": np.zeros(1),
        }
        if use_batchnorm:
            for layer in ("1", "2"):
                params[f"gamma{layer}"] = np.ones(hidden)
                params[f"beta{layer}"] = np.zeros(hidden)
                params[f"run_mean{layer}"] = np.zeros(hidden)
                params[f"run_var{layer}"] = np.ones(hidden)
        return MLPFeatureMap(params=params, use_batchnorm=use_batchnorm)

    def copy(self) -> "MLPFeatureMap":
        return MLPFeatureMap(params={k: v.copy() for k, v in self.params.items()},
                             use_batchnorm=self.use_batchnorm)

    def _bn(self, a, layer, train, caches):
        p = self.params
        if train:
            mu = a.mean(axis=0)
            var = a.var(axis=0)
            p[f"run_mean{layer}"] = _BN_MOMENTUM * p[f"run_mean{layer}"] + (1 - _BN_MOMENTUM) * mu
            p[f"run_var{layer}"] = _BN_MOMENTUM * p[f"run_var{layer}"] + (1 - _BN_MOMENTUM) * var
        else:
            mu, var = p[f"run_mean{layer}"], p[f"run_var{layer}"]
        inv_sd = 1.0 / np.sqrt(var + _BN_EPS)
        xhat = (a - mu) * inv_sd
        if caches is not None:
            caches[f"bn{layer}"] = (xhat, inv_sd)
        return p[f"gamma{layer}"] * xhat + p[f"beta{layer}"]

    def forward(self, x, train=False, caches=None):
        """Returns (last hidden activations, head predictions)."""
        p = self.params
        a1 = x @ p["W1"] + p["b1"]
        a1n = self._bn(a1, "1", train, caches) if self.use_batchnorm else a1
        h1 = np.maximum(a1n, 0.0)
        a2 = h1 @ p["W2"] + p["b2"]
        a2n = self._bn(a2, "2", train, caches) if self.use_batchnorm else a2
        h2 = np.maximum(a2n, 0.0)
        yhat = h2 @ p["w3"] + p["b3"][0]
        if caches is not None:
            caches.update(x=x, a1n=a1n, h1=h1, a2n=a2n, h2=h2)
        return h2, yhat

    def _bn_backward(self, dout, layer, caches):
        xhat, inv_sd = caches[f"bn{layer}"]
        m = dout.shape[0]
        grads = {f"gamma{layer}": (dout * xhat).sum(axis=0),
                 f"beta{layer}": dout.sum(axis=0)}
        dxhat = dout * self.params[f"gamma{layer}"]
        da = (inv_sd / m) * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return da, grads

    def backward(self, dyhat, caches):
        """Gradient of the loss wrt every parameter, given d loss / d yhat."""
        p = self.params
        grads = {"w3": caches["h2"].T @ dyhat, "b3": np.array([dyhat.sum()])}
        dh2 = np.outer(dyhat, p["w3"])
        da2n = dh2 * (caches["h2"] > 0)
        if self.use_batchnorm:
            da2, bn_grads = self._bn_backward(da2n, "2", caches)
            grads.update(bn_grads)
        else:
            da2 = da2n
        grads["W2"] = caches["h1"].T @ da2
        grads["b2"] = da2.sum(axis=0)
        dh1 = da2 @ p["W2"].T
        da1n = dh1 * (caches["h1"] > 0)
        if self.use_batchnorm:
            da1, bn_grads = self._bn_backward(da1n, "1", caches)
            grads.update(bn_grads)
        else:
            da1 = da1n
        grads["W1"] = caches["x"].T @ da1
        grads["b1"] = da1.sum(axis=0)
        return grads


@dataclass(frozen=True)
class NeuralLinearModel:
    """Bayesian last-layer regression on a trainable feature map.

    theta ~ N(mu0, sigma0^2 I) over the last hidden layer, observation
    noise sigma. train_steps AdaGrad steps are run whenever the feature map
    is refreshed on a coreset.
    """

    feature_map: MLPFeatureMap
    sigma: float = 1.0
    sigma0: float = 1.0
    mu0: Optional[np.ndarray] = None
    train_steps: int = 1000
    learning_rate: float = 0.05
    train_batch: int = 32

    def __post_init__(self):
        if not (self.sigma > 0 and self.sigma0 > 0):
            raise ModelError("sigma and sigma0 must be positive")

    @staticmethod
    def create(in_dim, hidden, rng, *, sigma=1.0, sigma0=1.0, use_batchnorm=False,
               train_steps=1000, learning_rate=0.05, train_batch=32) -> "NeuralLinearModel":
        fmap = MLPFeatureMap.init(in_dim, hidden, rng, use_batchnorm=use_batchnorm)
        return NeuralLinearModel(feature_map=fmap, sigma=sigma, sigma0=sigma0,
                                 train_steps=train_steps, learning_rate=learning_rate,
                                 train_batch=train_batch)

    @property
    def hidden(self) -> int:
        return self.feature_map.params["w3"].shape[0]

    def features(self, x) -> np.ndarray:
        """Evaluation-mode last-layer representation z(x)."""
        z, _ = self.feature_map.forward(np.atleast_2d(x), train=False)
        return z

    def f_matrix(self, ds, indices, thetas, beta):
        indices = np.asarray(indices, dtype=int)
        if ds.labels is None:
            raise ModelError("neural linear model requires regression labels")
        z = self.features(ds.features[indices])
        y = ds.labels[indices]
        thetas = np.atleast_2d(thetas)
        resid = y[None, :] - thetas @ z.T
        sq = resid * resid / (2.0 * self.sigma**2)
        if beta.classical:
            # normalization constants dropped
            return -sq
        b = beta.beta
        scale = np.exp(-b * (0.5 * np.log(2.0 * np.pi) + np.log(self.sigma)))
        return scale * (np.exp(-b * sq) / b - (1.0 + b) ** -1.5)

    def beta_f(self, x, y, theta, beta) -> float:
        from .gaussian import _OnePoint

        ds = _OnePoint(x)
        ds.labels = np.atleast_1d(np.asarray(y, dtype=float))
        return float(self.f_matrix(ds, [0], np.atleast_2d(theta), beta)[0, 0])

    def blr_posterior(self, ds, indices, weights):
        """Closed-form Gaussian posterior (mu_w, Sigma_w) of the last layer."""
        indices = np.asarray(indices, dtype=int)
        weights = np.asarray(weights, dtype=float)
        if np.any(weights < 0):
            raise ModelError("weights must be nonnegative")
        h = self.hidden
        mu0 = np.zeros(h) if self.mu0 is None else self.mu0
        precision = np.eye(h) / self.sigma0**2
        rhs = mu0 / self.sigma0**2
        if len(indices):
            z = self.features(ds.features[indices])
            y = ds.labels[indices]
            precision = precision + (z.T * weights) @ z / self.sigma**2
            rhs = rhs + (weights * y) @ z / self.sigma**2
        factor = cho_factor(precision, lower=True)
        return cho_solve(factor, rhs), cho_solve(factor, np.eye(h))

    def predictive(self, posterior, x):
        """Predictive mean and variance at each row of x."""
        mu_w, Sigma_w = posterior
        z = self.features(np.atleast_2d(x))
        means = z @ mu_w
        variances = self.sigma**2 + ((z @ Sigma_w) * z).sum(axis=1)
        return means, variances

    def sample_posterior(self, ds, indices, weights, n_samples, rng, *, beta=None, cache=None):
        mu_w, Sigma_w = self.blr_posterior(ds, indices, weights)
        chol_c = cholesky(Sigma_w, lower=True)
        return mu_w + rng.standard_normal((n_samples, self.hidden)) @ chol_c.T

    def training_loss(self, ds, indices, weights) -> float:
        """Full-batch weighted squared error of the training head (eval mode)."""
        indices = np.asarray(indices, dtype=int)
        _, yhat = self.feature_map.forward(ds.features[indices], train=False)
        resid = ds.labels[indices] - yhat
        return float(np.asarray(weights) @ (resid * resid))

    def after_reweight(self, ds, indices, weights, rng) -> "NeuralLinearModel":
        """Builder hook: refresh the feature map on the current coreset."""
        if self.train_steps <= 0 or len(indices) == 0:
            return self
        return mlp_train(self, ds, indices, weights, self.train_steps, rng)


def mlp_train(model: NeuralLinearModel, ds, indices, weights, steps, rng) -> NeuralLinearModel:
    """Minibatch AdaGrad training of the feature map on weighted squared error.

    Only the given coreset rows participate. Returns a new model holding the
    updated feature map; batch-normalization statistics are frozen afterwards
    because all downstream evaluation runs the map in evaluation mode.

    Raises:
        ConvergenceError: the training loss became non-finite.
    """
    indices = np.asarray(indices, dtype=int)
    weights = np.asarray(weights, dtype=float)
    if len(indices) == 0:
        raise ModelError("mlp_train requires a nonempty coreset")
    if steps <= 0:
        return replace(model, feature_map=model.feature_map.copy())

    fmap = model.feature_map.copy()
    accum = {k: np.zeros_like(v) for k, v in fmap.params.items() if not k.startswith("run_")}
    x_all, y_all = ds.features[indices], ds.labels[indices]
    batch = min(model.train_batch, len(indices))
    for _ in range(steps):
        pick = rng.choice(len(indices), size=batch, replace=False)
        xb, yb, wb = x_all[pick], y_all[pick], weights[pick]
        caches = {}
        _, yhat = fmap.forward(xb, train=True, caches=caches)
        resid = yb - yhat
        loss = wb @ (resid * resid)
        if not np.isfinite(loss):
            raise ConvergenceError("training loss diverged to a non-finite value")
        grads = fmap.backward(-2.0 * wb * resid, caches)
        for key, grad in grads.items():
            accum[key] += grad * grad
            fmap.params[key] -= model.learning_rate * grad / (np.sqrt(accum[key]) + 1e-8)
    return replace(model, feature_map=fmap)
