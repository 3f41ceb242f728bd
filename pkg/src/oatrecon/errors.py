"""Exception types shared across the package.

Plain argument misuse (bad shapes, out-of-range indices) raises ValueError;
the classes below cover failures that callers may want to handle separately.
"""


class OatError(Exception):
    """Base class for package-specific errors."""


class ConfigError(OatError):
    """Configuration file is missing a key or violates an invariant."""

    def __init__(self, key: str, message: str):
        super().__init__(f"config key '{key}': {message}")
        self.key = key


class FormatError(OatError):
    """A binary or text artifact on disk is malformed."""


class GeometryError(OatError):
    """Sensor/grid geometry is inconsistent (sensor inside grid, zero distance)."""


class SingularSystemError(OatError):
    """Normal equations are singular; a positive regularization weight is needed."""


class DivergenceError(OatError):
    """An iterative solver or training loop produced a non-finite value."""
