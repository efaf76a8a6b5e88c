"""Exception types shared across the package."""


class MoeirError(Exception):
    """Base class for package errors."""


class DimensionError(MoeirError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(MoeirError, ValueError):
    """A configuration value violates a structural constraint."""


class DataError(MoeirError, ValueError):
    """Input data (labels, samples) is out of its declared domain."""


class NumericsError(MoeirError, RuntimeError):
    """Training aborted on a non-finite value."""
