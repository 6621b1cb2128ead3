"""Exception types shared across the package."""


class DataError(ValueError):
    """Malformed input data or an invalid data-pipeline request."""


class ConfigError(ValueError):
    """Invalid experiment or build configuration."""


class ModelError(RuntimeError):
    """A statistical-model computation failed."""


class ConvergenceError(ModelError):
    """An iterative optimizer failed to converge.

    Attributes:
        grad_norm: gradient norm at the last iterate, when available.
    """

    def __init__(self, message, grad_norm=None):
        super().__init__(message)
        self.grad_norm = grad_norm
