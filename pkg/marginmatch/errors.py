"""Exception hierarchy for marginmatch."""

from typing import Optional


class MarginMatchError(ValueError):
    """Base class for every domain failure raised by marginmatch."""


class InvalidInputError(MarginMatchError):
    """Raised when an operation receives malformed numbers, shapes or indices."""


class InvalidConfigError(MarginMatchError):
    """Raised when a hyperparameter or data setting is outside its valid range."""


class OutOfOrderUpdateError(MarginMatchError):
    """Raised when an AUM tracker is updated with a non-consecutive pass index."""


class CalibrationUnavailableError(MarginMatchError):
    """Raised when the AUM cutoff cannot be calibrated (no threshold samples)."""


class NumericalFailureError(MarginMatchError):
    """Raised when a loss or a parameter becomes non-finite."""


class TraceFormatError(MarginMatchError):
    """Raised when an on-disk artifact cannot be decoded."""

    def __init__(self, message: str, offset: Optional[int] = None):
        """
        Initialize the error.

        Args:
            message: Human-readable description
            offset: Byte offset (or line number for JSONL) where decoding failed
        """
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionMismatchError(TraceFormatError):
    """Raised when an artifact carries an unknown magic or version."""


class CountMismatchError(TraceFormatError):
    """Raised when header counts disagree with the body."""


class IncompleteTraceError(MarginMatchError):
    """Raised when a trace is missing passes for some example."""
