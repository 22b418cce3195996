class TpflowError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(TpflowError):
    """Invalid configuration: bad shapes, unknown keys, out-of-range settings."""


class NumericsError(TpflowError):
    """A value that must be finite is NaN or infinite."""
