"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericalError -> 4.
"""


class AttkitError(Exception):
    """Base class for all package errors."""


class ConfigError(AttkitError):
    """Invalid configuration: unknown keys, malformed values, bad flags."""


class DataError(AttkitError):
    """Malformed or contract-violating input data."""


class NumericalError(AttkitError):
    """Numerical failure during estimation (singular systems, thresholds)."""
