"""Exception hierarchy. Each CLI-facing error carries the process exit code."""


class HRANError(Exception):
    exit_code = 1


class ShapeError(HRANError, ValueError):
    """Tensor dimensions do not satisfy an operation's contract."""

    exit_code = 2


class ConfigError(HRANError, ValueError):
    exit_code = 2


class CheckpointError(ConfigError):
    """Unreadable checkpoint, or one built for a different configuration."""


class DataError(HRANError):
    exit_code = 3


class ImageFormatError(DataError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(HRANError, ArithmeticError):
    exit_code = 4


class CacheError(HRANError, RuntimeError):
    """Backward requested without a matching forward cache."""
