"""Exception types raised across DemineUQ.

Every error carries a short ``reason`` string so the CLI (and anything that
serializes failures into a manifest) can report ``{"error", "reason"}`` pairs
without parsing messages.
"""
from __future__ import annotations


class DemineUQError(Exception):
    reason = "error"

    def __init__(self, message: str, *, reason: str | None = None) -> None:
        super().__init__(message)
        if reason is not None:
            self.reason = reason

    def to_dict(self) -> dict:
        return {"error": str(self), "reason": self.reason}


class InvalidArgumentError(DemineUQError, ValueError):
    reason = "invalid_argument"


class ConfigValidationError(InvalidArgumentError):
    reason = "config_validation"

    def __init__(self, message: str, *, field: str | None = None) -> None:
        super().__init__(message)
        self.field = field


class ShapeMismatchError(InvalidArgumentError):
    reason = "shape_mismatch"


class MissingDirectoryError(DemineUQError, FileNotFoundError):
    reason = "missing_directory"


class EmptyDatasetError(InvalidArgumentError):
    reason = "empty_dataset"


class FractionTooSmallError(InvalidArgumentError):
    reason = "fraction_too_small"


class UntrainedModelError(DemineUQError, RuntimeError):
    reason = "untrained_model"


class DivergenceError(DemineUQError, RuntimeError):
    reason = "divergence"

    def __init__(self, message: str, *, epoch: int) -> None:
        super().__init__(message)
        self.epoch = epoch


class CheckpointFormatError(DemineUQError, ValueError):
    reason = "checkpoint_format"


class CheckpointVersionError(CheckpointFormatError):
    reason = "checkpoint_version"

    def __init__(self, found: object, expected: object) -> None:
        super().__init__(f"checkpoint format version {found!r} does not match supported version {expected!r}")
        self.found = found
        self.expected = expected


class PretrainedWeightsUnavailableError(DemineUQError, RuntimeError):
    reason = "pretrained_unavailable"


class IncompatibleAggregationError(InvalidArgumentError):
    reason = "incompatible_aggregation"


class ScenarioMismatchError(InvalidArgumentError):
    reason = "scenario_mismatch"


class ConfigMismatchError(InvalidArgumentError):
    reason = "config_mismatch"


class UnknownAxisError(InvalidArgumentError):
    reason = "unknown_axis"


class SampleEvaluationError(DemineUQError, RuntimeError):
    reason = "sample_failed"

    def __init__(self, source_id: str, cause: BaseException) -> None:
        super().__init__(f"evaluation failed for source_id={source_id}: {cause}")
        self.source_id = source_id
        self.cause = cause
