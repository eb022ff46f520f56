"""Exception types shared across the package."""


class AgnocommError(Exception):
    """Base class for all package errors."""


class ConfigurationError(AgnocommError, ValueError):
    """Invalid configuration, dimension mismatch or missing artifact."""


class CapacityError(AgnocommError, ValueError):
    """A set is larger than the autoencoder's maximum cardinality."""


class NumericalError(AgnocommError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class UsageError(AgnocommError, RuntimeError):
    """An API was called out of order (e.g. backward without forward)."""
