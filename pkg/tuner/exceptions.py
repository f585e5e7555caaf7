"""
Exception hierarchy shared by the tuner modules.

Library code raises these; the command-line entry points catch `TunerError`,
log it and exit with a nonzero code.
"""

from typing import Optional, Sequence


class TunerError(Exception):
    """Base class of every error raised on purpose by the tuner."""


class InvalidArgumentError(TunerError, ValueError):
    """An argument violates the contract of the operation (dimension, range, name)."""


class NumericalFailureError(TunerError, RuntimeError):
    """
    A covariance matrix could not be factorized.

    Attributes:
        jitter_levels (tuple): Diagonal jitter values that were tried, in order.
    """

    def __init__(self, message: str, jitter_levels: Sequence[float] = ()):
        super().__init__(f"{message} (jitter tried: {list(jitter_levels)})")
        self.jitter_levels = tuple(jitter_levels)


class NotFoundError(TunerError, LookupError):
    """A requested record does not exist, e.g. the best trial of an all-failed history."""


class ObjectiveFailure(TunerError, RuntimeError):
    """
    The objective could not produce a measurement for a configuration.

    Attributes:
        output_tail (str): Last part of the captured benchmark output, if any.
        task (Optional[str]): Task whose metric was missing, if the failure is an extraction miss.
    """

    def __init__(self, message: str, output_tail: str = "", task: Optional[str] = None):
        super().__init__(message)
        self.output_tail = output_tail
        self.task = task


class ConfigError(TunerError):
    """
    The tuner config file is unreadable or invalid.

    Attributes:
        field (str): Dotted path of the offending field ("" for syntax errors).
        line (Optional[int]): Line number for JSON syntax errors.
        column (Optional[int]): Column number for JSON syntax errors.
    """

    def __init__(
        self,
        message: str,
        field: str = "",
        line: Optional[int] = None,
        column: Optional[int] = None,
    ):
        location = ""
        if line is not None:
            location = f"line {line} column {column}: "
        elif field:
            location = f"field '{field}': "
        super().__init__(f"{location}{message}")
        self.field = field
        self.line = line
        self.column = column


class TrialLogError(TunerError):
    """A trial log is corrupt or does not belong to the run being resumed."""
