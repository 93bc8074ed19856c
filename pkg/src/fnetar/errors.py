"""Exception hierarchy shared by every fnetar module."""


class FNetARError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FNetARError, ValueError):
    """Extents of the operands are incompatible."""


class ConfigError(FNetARError, ValueError):
    """A configuration value is invalid or inconsistent."""


class DomainError(FNetARError, ValueError):
    """An argument lies outside the domain of the operation."""


class NumericalError(FNetARError, ArithmeticError):
    """Overflow, NaN, or a degenerate distribution was produced."""


class DegenerateDistributionError(NumericalError):
    """Every entry along a softmax axis was masked out."""


class TapeError(FNetARError, RuntimeError):
    """Misuse of the differentiation tape."""


class DataError(FNetARError):
    """Malformed corpus or vocabulary input."""


class CheckpointError(FNetARError):
    """Base class for checkpoint read failures."""


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    """The checkpoint decodes but disagrees with its own configuration."""
