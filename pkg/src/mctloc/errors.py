"""Exception hierarchy shared by all modules."""


class MCTError(Exception):
    """Base class for package errors."""


class ShapeError(MCTError, ValueError):
    pass


class ConfigError(MCTError, ValueError):
    pass


class FormatError(MCTError, ValueError):
    """Corrupt or truncated on-disk artifact."""


class NumericalError(MCTError, FloatingPointError):
    """A computation produced non-finite values."""
