"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operands have incompatible shapes."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""


class GenerationError(RuntimeError):
    """Synthetic data construction could not satisfy its invariants."""


class FormatError(ValueError):
    """A persisted artifact is malformed, truncated, or wrong-version."""
