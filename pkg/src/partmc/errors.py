"""Exception hierarchy shared by every partmc module."""


class PartmcError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class InvalidInputError(PartmcError, ValueError):
    exit_code = 2


class InvalidHyperparameterError(InvalidInputError):
    pass


class ResourceLimitError(PartmcError):
    exit_code = 4


class OptimizationFailure(PartmcError, RuntimeError):
    """Raised when empirical-Bayes fitting does not converge.

    ``trace`` holds the per-start optimizer summaries for post-mortem.
    """

    exit_code = 3

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class InsufficientRegenerationError(PartmcError):
    """Too few returns to the regeneration state, or an ill-conditioned covariance."""

    exit_code = 6


class InsufficientStatesError(PartmcError):
    exit_code = 6
