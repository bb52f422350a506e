"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration, caught before any work starts."""


class UnsupportedOperation(RuntimeError):
    """The operation is not defined for this model variant."""
