"""Exception types shared across the package."""


class DiffMapError(Exception):
    """Base class for package errors."""


class ConfigError(DiffMapError, ValueError):
    """Invalid configuration or incompatible checkpoints."""


class ContractError(DiffMapError, ValueError):
    """A call violated an operation's preconditions (shape, range)."""


class FormatError(DiffMapError, ValueError):
    """On-disk data is missing, corrupt, or inconsistent."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class DivergenceError(DiffMapError, RuntimeError):
    """Training produced a non-finite loss."""
