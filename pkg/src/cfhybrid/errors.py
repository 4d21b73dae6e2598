"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value, config file, or CLI argument."""


class NumericalError(RuntimeError):
    """Numerical failure: NaN statistics, indefinite covariance, solver breakdown."""


class DegenerateLinkError(NumericalError):
    """A serving link has zero estimated channel energy and cannot be normalized."""
