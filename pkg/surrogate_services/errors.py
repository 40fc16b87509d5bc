"""Exceptions raised across the surrogate services."""


class SurrogateError(Exception):
    """Base class for every error raised on purpose by this package."""


class UsageError(SurrogateError, ValueError):
    """Invalid arguments: wrong dimensions, levels, enum values or config keys."""


class NumericalFailure(SurrogateError, ArithmeticError):
    """A computation produced NaN/inf or lost a structural property (definiteness)."""

    def __init__(self, message: str, value: float | None = None):
        super().__init__(message)
        self.value = value


class ConvergenceError(NumericalFailure):
    """An iterative solver stopped before reaching its tolerance where it must not."""


class DivergenceError(NumericalFailure):
    """The training loss became non-finite."""
