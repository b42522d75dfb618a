"""Exception types raised by the isc package."""

from __future__ import annotations


class IscError(Exception):
    """Base class for all errors raised by this package."""


class ScanFormatError(IscError, ValueError):
    """A scan file could not be decoded."""


class TruncatedRecordError(ScanFormatError):
    pass


class NonFiniteValueError(ScanFormatError):
    pass


class MalformedLineError(ScanFormatError):
    def __init__(self, path, lineno: int, reason: str):
        self.path = path
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {reason}")


class DimensionMismatchError(IscError, ValueError):
    pass


class OutOfOrderFrameError(IscError, ValueError):
    pass


class InsufficientHistoryError(IscError, LookupError):
    def __init__(self, missing):
        self.missing = tuple(missing)
        super().__init__(f"frames missing from database: {list(self.missing)}")


class NoCorrespondencesError(IscError, RuntimeError):
    pass


class MissingScanError(IscError, FileNotFoundError):
    pass


class GroundTruthError(IscError, ValueError):
    pass


class ConfigError(IscError, ValueError):
    pass
