"""Exception types shared across the package."""


class NumericalFailure(ArithmeticError):
    """A matrix became singular or the filter produced non-finite values."""


class InconsistentScenario(ValueError):
    """A trajectory history violates the constraints of its motion cell."""


class RunFailed(RuntimeError):
    """A filter run diverged; carries the seed and step index."""

    def __init__(self, message: str, seed=None, step=None):
        super().__init__(message)
        self.seed = seed
        self.step = step


class ConfigError(ValueError):
    """Invalid scenario configuration; names the key and line when known."""
