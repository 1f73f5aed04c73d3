"""Exception hierarchy shared by every module."""


class MastError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(MastError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(MastError, ValueError):
    """A schedule, frontend or training configuration is invalid."""


class InputError(MastError, ValueError):
    """Bad user-supplied data (labels, datasets, arguments)."""


class FormatError(MastError, ValueError):
    """A binary or text file does not follow its declared layout."""


class CheckpointError(MastError):
    """Checkpoint contents do not match the requested schedule."""


class NonFiniteError(MastError, FloatingPointError):
    """An operation produced NaN or Inf."""
