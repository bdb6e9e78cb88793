"""Exception hierarchy shared across the package.

Every error the CLI can surface carries an exit code and a machine-parsable
prefix, so shell callers can branch on either.
"""


class CvlocError(Exception):
    """Base class for package errors."""

    code = 1
    prefix = "E_INTERNAL"


class ConfigError(CvlocError):
    """Bad configuration: unknown keys, invalid values, shape constraints."""

    code = 2
    prefix = "E_CONFIG"


class DimensionError(ConfigError):
    """Tensor shapes do not conform to an operation's contract."""

    prefix = "E_DIM"


class UsageError(ConfigError):
    """An operation was called in a way its contract forbids."""

    prefix = "E_USAGE"


class DataError(CvlocError):
    """Missing, corrupt, or out-of-range data."""

    code = 3
    prefix = "E_DATA"


class NumericError(CvlocError):
    """Non-finite values where finite ones are required."""

    code = 4
    prefix = "E_NUMERIC"
