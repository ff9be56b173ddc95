"""Exception hierarchy shared by every module of the engine."""

from __future__ import annotations


class EngineError(Exception):
    """Base class for all errors raised by sparsemoe."""


class ConfigError(EngineError, ValueError):
    pass


class ShapeError(EngineError, ValueError):
    pass


class RangeError(EngineError, IndexError):
    pass


class StateError(EngineError, RuntimeError):
    pass


class ContainerError(EngineError):
    """Malformed, incomplete or corrupted weight container."""


class ChecksumError(ContainerError):
    pass


class StorageError(EngineError, OSError):
    """A segment read failed. ``retryable`` tells the caller a retry may succeed."""

    def __init__(self, message: str, retryable: bool = True):
        super().__init__(message)
        self.retryable = retryable


class CapacityError(EngineError):
    """An entry can never fit in the cache."""


class OvercommitError(CapacityError):
    """Every resident entry is pinned and there is no room for a new one."""


class TraceParseError(EngineError, ValueError):
    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number
