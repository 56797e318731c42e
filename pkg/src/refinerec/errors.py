"""Exception classes shared across the package.

The CLI maps these onto distinct exit codes (config=2, data=3, numeric=4).
"""


class RefineRecError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(RefineRecError):
    """Invalid configuration: unknown key, bad value, infeasible parameter."""


class DataError(RefineRecError):
    """Unreadable or malformed input data, or incompatible artifacts."""


class NumericError(RefineRecError):
    """Numeric failure during computation (non-finite values, bad shapes)."""


class ShapeError(NumericError):
    """Operand shapes are incompatible for the requested operation."""


class UsageError(RefineRecError):
    """API contract violation (e.g. backward on a non-scalar loss)."""
