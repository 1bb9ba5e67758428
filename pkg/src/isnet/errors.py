"""Exception types; CLI exit codes map onto these."""


class IsnetError(Exception):
    exit_code = 1


class DimensionError(IsnetError, ValueError):
    """Operand extents are incompatible."""

    exit_code = 2


class UsageError(IsnetError, ValueError):
    exit_code = 2


class DataError(IsnetError):
    exit_code = 3


class FormatError(DataError):
    """A file on disk does not match its binary layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(IsnetError, ValueError):
    exit_code = 2


class EmptyRegionError(IsnetError):
    """A class has no member pixels, so it has no region representation."""


class ConsistencyError(IsnetError):
    """Internal invariant broken, e.g. a region vector missing for an assigned class."""


class UndefinedMetricError(IsnetError):
    """No class is present in either ground truth or prediction."""
