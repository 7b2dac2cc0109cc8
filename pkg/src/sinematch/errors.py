"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration (CLI exit code 2)."""
