"""Exception types shared across the package."""


class GFormerError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(GFormerError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(GFormerError, ValueError):
    """An operation received non-finite or otherwise invalid numeric input."""


class ConfigError(GFormerError, ValueError):
    """A block or mixer configuration is invalid or inconsistent."""


class UnsupportedOpError(GFormerError, ValueError):
    """A gradient rule was requested for an unknown operation name."""


class InsufficientDataError(GFormerError, ValueError):
    """Not enough data points to perform a fit."""


class IntegrityError(GFormerError, ValueError):
    """A sequence index no longer forms a bijection onto its rows."""


class TrainingDivergedError(GFormerError, RuntimeError):
    """Training produced a non-finite loss. Carries the offending step."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"loss became non-finite at step {step}")
