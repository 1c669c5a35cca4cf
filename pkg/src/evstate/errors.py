"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage/config problems -> 1,
data/format problems -> 2, numeric failures -> 3.
"""


class EvstateError(Exception):
    """Base class for all package errors."""


class ConfigError(EvstateError):
    """Bad configuration: unknown key, malformed value, invalid combination."""


class DecodeError(EvstateError):
    """Malformed image payload. Carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class FormatError(EvstateError):
    """Malformed stream/checkpoint file: bad magic, truncated record, unsorted data."""


class DataError(EvstateError):
    """Dataset-level problem: missing files, empty sequence, label out of range."""


class NumericError(EvstateError):
    """Non-finite value where a finite one is required (loss, gradient, parameter)."""
