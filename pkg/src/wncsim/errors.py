"""Exception types shared across the package."""


class ModelInvalidError(ValueError):
    """A model matrix or parameter violates its structural requirements."""


class SolverFailureError(RuntimeError):
    """An iterative solver did not meet its convergence target."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NumericError(RuntimeError):
    """A linear-algebra step hit a singular or badly conditioned matrix."""


class ConfigError(ValueError):
    """Invalid identifier layout or network configuration."""


class ScenarioValidationError(ValueError):
    """Scenario document failed validation; carries every error found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("scenario validation failed:\n" + "\n".join(self.errors))
