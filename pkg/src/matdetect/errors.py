"""Exception types shared across the toolkit."""

from __future__ import annotations


class MatdetectError(Exception):
    """Base class for all toolkit errors."""


# material data
class MalformedRecord(MatdetectError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class CoefficientOutOfRange(MatdetectError):
    pass


class DuplicateName(MatdetectError):
    pass


class DomainError(MatdetectError, ValueError):
    pass


class UnknownMaterial(MatdetectError, KeyError):
    pass


# clustering
class TooFewPoints(MatdetectError, ValueError):
    pass


class NonFiniteInput(MatdetectError, ValueError):
    pass


class DegenerateClusters(MatdetectError, ValueError):
    pass


class DegenerateW(UserWarning):
    """Within-cluster scatter is zero; the VRC is reported as +inf."""


class SizeMismatch(MatdetectError, ValueError):
    pass


# simulation
class UnstableFilter(MatdetectError):
    pass


class InfeasibleGeometry(MatdetectError, ValueError):
    pass


# features / nn
class EmptyInput(MatdetectError, ValueError):
    pass


class ShapeMismatch(MatdetectError, ValueError):
    pass


# detector
class EmptySplit(MatdetectError):
    pass


class DegenerateLabels(UserWarning):
    """A category has no positive (or no negative) training samples."""


class SampleRateMismatch(MatdetectError, ValueError):
    pass


# baseline
class InputTooShort(MatdetectError, ValueError):
    pass


class SingularSystem(UserWarning):
    """Prony normal equations were rank deficient and got ridge-regularized."""


class SingleClassSplit(MatdetectError, ValueError):
    pass


class DimensionMismatch(MatdetectError, ValueError):
    pass


# evaluation
class TooFewRooms(MatdetectError, ValueError):
    pass


class LengthMismatch(MatdetectError, ValueError):
    pass


# pipeline
class ConfigError(MatdetectError, ValueError):
    pass


class StageFailure(MatdetectError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
