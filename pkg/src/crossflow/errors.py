"""Exception types shared across the package."""


class CrossflowError(Exception):
    """Base class for all package errors."""


class DimensionError(CrossflowError):
    """Array shapes do not satisfy an operation's contract."""


class ContractError(CrossflowError):
    """A precondition on arguments or state was violated."""


class DataError(CrossflowError):
    """Input data is malformed, inconsistent, or insufficient."""


class ConfigError(CrossflowError):
    """A configuration value is out of range or inconsistent."""


class NumericError(CrossflowError):
    """A numeric procedure failed to converge or produced non-finite values."""


class FormatError(CrossflowError):
    """A serialized artifact (checkpoint, bundle) violates its on-disk format."""
