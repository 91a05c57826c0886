from __future__ import annotations

from collections.abc import Sequence


class ContextDebiasError(Exception):
    """Base class for every error raised by the pipeline."""


class ConfigError(ContextDebiasError, ValueError):
    pass


class SchemaError(ContextDebiasError, ValueError):
    pass


class ProvenanceError(ContextDebiasError, ValueError):
    pass


class DimensionError(ContextDebiasError, ValueError):
    pass


class TokenResolutionError(ContextDebiasError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "token_resolution_failed"


class UndefinedScoreError(ContextDebiasError, ValueError):
    pass


class InsufficientDataError(ContextDebiasError, ValueError):
    pass


class UndefinedMetricError(ContextDebiasError, ValueError):
    pass


class PreconditionError(ContextDebiasError, ValueError):
    pass


class AnnotatorStateError(ContextDebiasError, RuntimeError):
    pass


class CheckpointFormatError(ContextDebiasError, RuntimeError):
    pass


class StageOrderError(ContextDebiasError, RuntimeError):
    pass


class TrainingFailure(ContextDebiasError, RuntimeError):
    """Loss became non-finite; ``trace`` holds every recorded row up to the failure."""

    def __init__(self, message: str, trace: Sequence[Sequence[float]] | Sequence[float]) -> None:
        super().__init__(message)
        self.trace = list(trace)


class StaleInputError(ContextDebiasError, RuntimeError):
    def __init__(self, path: str, expected: str, actual: str | None) -> None:
        super().__init__(f"Digest mismatch path={path} expected={expected} actual={actual or 'missing'}")
        self.path = path
        self.expected = expected
        self.actual = actual
