"""Exception hierarchy shared by all pipeline stages.

Every error carries an ``exit_code`` so the command line can map failures
onto its documented codes (1 usage/config, 2 data, 3 numeric).
"""

from __future__ import annotations


class MotionIDError(Exception):
    exit_code = 2


class ConfigError(MotionIDError):
    exit_code = 1


class DataError(MotionIDError):
    exit_code = 2


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(DataError):
    pass


class UnsupportedRateError(DataError):
    pass


class InsufficientLengthError(DataError):
    def __init__(self, message: str, required: int | None = None, available: int | None = None):
        self.required = required
        self.available = available
        super().__init__(message)


class ShapeError(DataError):
    pass


class NotFoundError(DataError):
    pass


class EmptyIndexError(DataError):
    pass


class DegenerateDataError(DataError):
    pass


class StateError(MotionIDError):
    exit_code = 3


class NumericError(MotionIDError):
    exit_code = 3


class FileFormatError(DataError):
    """Base for binary model/index file problems."""


class VersionError(FileFormatError):
    def __init__(self, found: int, supported: int):
        self.found = found
        self.supported = supported
        super().__init__(f"file format version {found} is newer than supported version {supported}")


class ChecksumError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    pass
