"""Exception hierarchy shared across the package."""


class PixelGenError(Exception):
    """Base class for all package errors."""


class DimensionError(PixelGenError, ValueError):
    """Incompatible tensor shapes."""


class ContractError(PixelGenError, ValueError):
    """A precondition on argument values was violated."""


class StateError(PixelGenError, RuntimeError):
    """An object was used in an invalid state (e.g. a consumed tape)."""


class ConfigError(PixelGenError, ValueError):
    """Invalid configuration value or key."""


class FormatError(PixelGenError, ValueError):
    """Malformed or truncated checkpoint file."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(FormatError):
    """Checkpoint written by an unsupported format version."""


class NumericalError(PixelGenError, ArithmeticError):
    """Non-finite value encountered where a finite one is required."""
