"""Exception types shared across the package."""


class HypwalkError(Exception):
    """Base class for all package errors."""


class ModelMismatchError(HypwalkError):
    """Operands belong to different space models."""


class NumericDegeneracyError(HypwalkError):
    """A numeric operation left the model's valid domain (e.g. Im z <= 0)."""


class TruncationError(HypwalkError):
    """A truncated boundary prefix is too short to resolve the requested value."""


class UnsupportedMeasureError(HypwalkError):
    """The measure is outside the domain an exact oracle supports."""


class GridError(HypwalkError):
    """A boundary target is not resolvable on the solver grid."""


class SolverDivergedError(HypwalkError):
    """The centering solver failed to reach the requested residual."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class InvariantViolationError(HypwalkError):
    """A mathematically guaranteed bound was violated; indicates a bug."""


class ConfigError(HypwalkError):
    """Invalid experiment configuration."""
