"""Statistical models exposing robustified likelihood terms and posterior samplers.

Every model implements the same small protocol consumed by the builder:

* ``f_matrix(ds, indices, thetas, beta)`` returns the (S, k) matrix of
  per-datapoint likelihood terms f_n(theta_s): the density-power terms for
  beta > 0, or plain log-likelihoods in classical mode.
* ``sample_posterior(ds, indices, weights, n_samples, rng, beta=..., cache=...)``
  draws from the posterior conditioned on the weighted subset.

The shared density-power convention is

    f_n(theta) = (1/beta) * pi(x_n | theta)**beta
                 - (1/(1+beta)) * integral pi(chi | theta)**(1+beta) dchi,

with the integral taken over the observation space (the response space for
supervised models), so that well-explained datapoints receive the largest
terms and f stays bounded below by the negative integral term.
"""

from dataclasses import dataclass

from ..exceptions import ConfigError


@dataclass(frozen=True)
class BetaConfig:
    """Robustness hyperparameter for the density-power likelihood terms.

    classical=True selects the beta -> 0 limit, where f_n is the ordinary
    log-likelihood and beta is ignored.
    """

    beta: float = 0.1
    classical: bool = False

    def __post_init__(self):
        if not self.classical and not self.beta > 0.0:
            raise ConfigError("beta must be > 0 unless classical mode is selected")

    @staticmethod
    def classical_mode() -> "BetaConfig":
        return BetaConfig(beta=0.0, classical=True)


from .gaussian import GaussianModel
from .logistic import LogisticModel, laplace_sample
from .neural_linear import MLPFeatureMap, NeuralLinearModel, mlp_train
from .toy import DiscreteToyModel, ToyExact

__all__ = [
    "BetaConfig",
    "GaussianModel",
    "LogisticModel",
    "laplace_sample",
    "MLPFeatureMap",
    "NeuralLinearModel",
    "mlp_train",
    "DiscreteToyModel",
    "ToyExact",
]
