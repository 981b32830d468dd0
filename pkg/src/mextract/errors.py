"""Exception hierarchy shared by every module."""

from __future__ import annotations


class ExtractionError(Exception):
    """Base class for all errors raised by this package."""

    #: exit code the CLI maps this error to
    exit_code = 4


class ConfigError(ExtractionError, ValueError):
    exit_code = 2


# oracle
class BudgetExhausted(ExtractionError):
    exit_code = 3


class InvalidInput(ExtractionError, ValueError):
    pass


class ModelNotLoaded(ExtractionError):
    pass


class InvalidPolicy(ExtractionError, ValueError):
    exit_code = 2


class InvalidSimplex(ExtractionError, ValueError):
    pass


# strategies
class PoolExhausted(ExtractionError):
    pass


class EmptyCenters(ExtractionError, ValueError):
    pass


class NonContinuousInput(ExtractionError, ValueError):
    pass


class RatioIndivisible(ExtractionError, ValueError):
    pass


# trainer
class DegradedLabels(ExtractionError, ValueError):
    pass


class EmptyPairs(ExtractionError, ValueError):
    pass


class SizeMismatch(ExtractionError, ValueError):
    pass


class UnknownOptimizer(ExtractionError, ValueError):
    exit_code = 2


class UnknownArchitecture(ExtractionError, ValueError):
    exit_code = 2


# metrics
class LengthMismatch(ExtractionError, ValueError):
    pass


class EmptySet(ExtractionError, ValueError):
    pass


class LabelSpaceMismatch(ExtractionError, ValueError):
    pass


# retro
class InconsistentConfidence(ExtractionError, ValueError):
    pass


class NoOverlap(ExtractionError, ValueError):
    pass


class SchemaViolation(ExtractionError, ValueError):
    exit_code = 2

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


# gateway
class BindFailure(ExtractionError, OSError):
    pass


class TransportError(ExtractionError):
    pass


class Unauthorized(ExtractionError):
    pass


class RateLimited(ExtractionError):
    def __init__(self, message: str, retry_after: float = 0.0):
        super().__init__(message)
        self.retry_after = retry_after


# harness
class TooSmall(ExtractionError, ValueError):
    pass


class UnknownFormat(ExtractionError, ValueError):
    exit_code = 2


class RoundError(ExtractionError):
    """Wraps a module error raised inside an attack round."""

    def __init__(self, round_index: int, cause: Exception):
        super().__init__(f"round {round_index}: {type(cause).__name__}: {cause}")
        self.round = round_index
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 4)
