"""Exception and warning types shared across the package."""


class XYChainError(Exception):
    """Base class for all package-specific errors."""


class GeometryError(XYChainError):
    """Singular or otherwise unusable atom geometry (e.g. coincident atoms)."""


class ConfigError(XYChainError):
    """Invalid configuration: bad keys, bad values, or violated preconditions."""


class DataError(XYChainError):
    """Input data violates a contract (unnormalized, out of range, too short)."""


class FitError(XYChainError):
    """A fit could not be performed or did not converge."""


class IntegrationError(XYChainError):
    """Numerical integration failed (step control or positivity violation)."""


class ExtrapolationWarning(UserWarning):
    """Evaluation outside a model's calibrated validity range."""
