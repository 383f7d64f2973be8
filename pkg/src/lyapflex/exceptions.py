"""Error types.

Every error carries a short machine-readable ``kind`` so the command line
can map it to an exit code and a JSON payload.
"""

from __future__ import annotations


class LyapflexError(Exception):
    """Base class for all package errors."""

    kind = "error"
    exit_code = 1

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details

    def to_dict(self):
        out = {"error": self.kind, "message": str(self)}
        out.update({k: _plain(v) for k, v in self.details.items()})
        return out


def _plain(value):
    # numpy scalars and arrays are not JSON serializable
    if hasattr(value, "tolist"):
        return value.tolist()
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    return repr(value)


class InvalidInputError(LyapflexError, ValueError):
    kind = "invalid-input"
    exit_code = 2


class NotASpectrumError(InvalidInputError):
    kind = "not-a-spectrum"


class InvalidTargetError(InvalidInputError):
    kind = "invalid-target"


class OutOfDomainError(InvalidInputError):
    kind = "out-of-domain"


class ConstructionFailedError(LyapflexError):
    kind = "construction-failed"
    exit_code = 3


class NumericFailureError(LyapflexError, ArithmeticError):
    kind = "numeric-failure"
    exit_code = 3


class TargetUnreachableError(LyapflexError):
    kind = "target-unreachable"
    exit_code = 3


class PlacementFailedError(LyapflexError):
    kind = "placement-failed"
    exit_code = 3


class CalibrationFailedError(LyapflexError):
    kind = "calibration-failed"
    exit_code = 5


class SteeringStalledError(LyapflexError):
    """Raised when a steering step does not converge.

    The plan built so far is attached as ``plan``.
    """

    kind = "steering-stalled"
    exit_code = 4

    def __init__(self, message, plan=None, **details):
        super().__init__(message, **details)
        self.plan = plan


class GapViolationError(SteeringStalledError):
    kind = "aborted-gap-violation"
