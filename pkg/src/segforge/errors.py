"""Exception types shared across the package.

The CLI maps these onto exit codes: usage errors exit 2, numerical
failures (divergence, degenerate statistics) exit 3, I/O and format
errors exit 4.
"""


class SegforgeError(Exception):
    pass


class ConfigError(SegforgeError, ValueError):
    """Invalid shapes, sizes or option combinations supplied by the caller."""


class InputError(SegforgeError, ValueError):
    """Data that violates a documented precondition (empty set, non-binary labels, ...)."""


class FormatError(SegforgeError, ValueError):
    """Corrupt or inconsistent file content; carries the byte offset when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UndefinedMetric(SegforgeError, ValueError):
    """A metric whose mathematical definition does not apply to this input."""


class DegenerateStatistics(SegforgeError, ValueError):
    """Statistics that cannot be computed (e.g. zero variance in a paired test)."""


class TrainingDivergence(SegforgeError, RuntimeError):
    """NaN/Inf encountered during optimization; carries epoch/step context in the message."""
