"""Exception types raised across the package.

All of them derive from ``ValueError`` so callers that only care about
"bad input" can catch one thing.
"""


class OctHybridError(ValueError):
    """Base class for package errors."""


class ConfigError(OctHybridError):
    """Inconsistent or unsupported configuration / shapes."""


class OutOfRangeError(OctHybridError):
    """A geometric request falls outside the data's support."""


class DomainError(OctHybridError):
    """A value is outside a function's mathematical domain (log of <= 0, ...)."""


class UnrecoverableMaskError(OctHybridError):
    """Every pixel is masked, nothing to interpolate from."""


class InsufficientDataError(OctHybridError):
    """Too few valid samples for the requested operation."""


class EmptyGridError(OctHybridError):
    """All superpixel cells are empty."""


class UndefinedStatisticError(OctHybridError):
    """Statistic needs both classes but only one is present."""


class InputValidationError(OctHybridError):
    """Non-finite or malformed model input."""


class ConvergenceError(OctHybridError):
    """An iterative solver did not converge.

    ``trace`` holds the per-iteration diagnostics.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class IntegrityError(OctHybridError):
    """A bundle file failed hash or size verification."""


class PreconditionError(OctHybridError):
    """A command's preconditions are not met (missing inputs, refusal)."""
