"""Exception types shared across the toolkit."""


class ModsplitError(Exception):
    """Base class for all toolkit-specific failures."""


class IngestionError(ModsplitError):
    """Raised when an on-disk dataset payload is malformed."""


class SpecValidationError(ModsplitError):
    """Raised when an architecture description is internally inconsistent."""


class DecodeError(ModsplitError):
    """Raised when a retained-kernel vector cannot be turned into a runnable module."""


class CompositionError(ModsplitError):
    """Raised when a set of modules cannot be assembled into a classifier."""


class CalibrationError(ModsplitError):
    """Raised when patch-output calibration is degenerate."""
