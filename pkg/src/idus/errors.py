"""Exception types raised across the package."""


class IdusError(Exception):
    """Base class for package-specific failures."""


class DegenerateInputError(IdusError, ValueError):
    """Input has no usable dynamic range (all-zero image, zero variance, single-label partition)."""


class ConfigurationError(IdusError):
    """A configuration is invalid or a required resource is unavailable."""


class UndefinedClassError(IdusError, ValueError):
    """A metric was requested for a class with no ground-truth support."""


class NonFiniteLossError(IdusError, RuntimeError):
    """Training produced a NaN or infinite loss."""
