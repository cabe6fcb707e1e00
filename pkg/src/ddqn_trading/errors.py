"""Exception hierarchy shared by every module.

``ValidationError`` subclasses signal bad input data or configuration; the
CLI maps them to exit code 1.  Everything else derived from ``TradingError``
is a runtime failure (exit code 2).
"""

from __future__ import annotations


class TradingError(Exception):
    pass


class ValidationError(TradingError):
    pass


class LineError(ValidationError):
    """Base for CSV problems tied to a 1-based physical line number."""

    def __init__(self, line_no: int, message: str = ""):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}" if message else f"line {line_no}")


class MalformedRow(LineError):
    pass


class InvariantViolation(LineError):
    pass


class NonMonotonicTimestamp(LineError):
    pass


class EmptySeries(ValidationError):
    pass


class ConfigInvalid(ValidationError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class SeriesTooShort(TradingError):
    pass


class SteppedAfterDone(TradingError):
    pass


class ShapeMismatch(TradingError):
    pass


class KernelTooLarge(ShapeMismatch):
    pass


class StaleCache(TradingError):
    pass


class ArchitectureMismatch(TradingError):
    pass


class CheckpointMismatch(TradingError):
    pass


class InsufficientData(TradingError):
    pass
