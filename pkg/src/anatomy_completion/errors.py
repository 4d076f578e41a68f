"""Exception hierarchy; each category maps to a CLI exit code."""

from __future__ import annotations

from typing import Optional


class CompletionError(Exception):
    """Base class for every error raised on purpose by this package."""

    exit_code = 1


class UsageError(CompletionError):
    """Raised for malformed command lines."""

    exit_code = 2


class ConfigError(UsageError, ValueError):
    """Raised when a configuration document or override is invalid."""


class ConflictError(ConfigError):
    """Raised when two overrides assign different values to one key."""


class DataError(CompletionError, ValueError):
    """Raised when volumes, corpora, or files on disk are unusable."""

    exit_code = 3


class InvalidVolumeError(DataError):
    """Raised when a grid violates the volume invariants."""


class ShapeError(DataError):
    """Raised when grids that must agree in shape do not."""


class OutOfRangeError(DataError):
    """Raised when a label or class id falls outside the allowed range."""


class UndefinedFractionError(DataError):
    """Raised when a volume fraction has an empty reference population."""


class NoCandidateError(DataError):
    """Raised when no anatomy qualifies for removal."""


class InvalidPolicyError(DataError):
    """Raised when a removal policy cannot be applied."""


class InvalidSpecError(DataError):
    """Raised when a phantom spec cannot be placed on its grid."""


class ChecksumError(DataError):
    """Raised when a cached file does not match its recorded digest."""


class AxisOrderError(DataError):
    """Raised when a cache sidecar declares an unsupported axis order."""


class SidecarParseError(DataError):
    """Raised when a JSON sidecar cannot be parsed."""

    def __init__(self, message: str, *, path: Optional[str] = None, offset: Optional[int] = None):
        super().__init__(message)
        self.path = path
        self.offset = offset


class MissingFileError(FileNotFoundError, DataError):
    """Raised when a referenced file is absent."""

    exit_code = 3

    def __init__(self, path: object):
        super().__init__(f"Missing file: {path}")
        self.path = str(path)

    def __str__(self) -> str:
        return f"Missing file: {self.path}"


class TrainingError(CompletionError, RuntimeError):
    """Raised when an optimization run cannot start or continue."""

    exit_code = 4


class NonFiniteLossError(TrainingError):
    """Raised when a batch produces a NaN or infinite loss."""

    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"Non-finite loss {value!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.value = value


class ManifestMismatchError(TrainingError):
    """Raised when a corpus manifest does not fit the experiment config."""


class EvaluationError(CompletionError, RuntimeError):
    """Raised when evaluation or reporting cannot proceed."""

    exit_code = 5


class AlignmentError(EvaluationError):
    """Raised when two reports do not cover the same instances."""


class PlaneError(EvaluationError, ValueError):
    """Raised for an unknown rendering plane."""


__all__ = [
    "AlignmentError",
    "AxisOrderError",
    "ChecksumError",
    "CompletionError",
    "ConfigError",
    "ConflictError",
    "DataError",
    "EvaluationError",
    "InvalidPolicyError",
    "InvalidSpecError",
    "InvalidVolumeError",
    "ManifestMismatchError",
    "MissingFileError",
    "NoCandidateError",
    "NonFiniteLossError",
    "OutOfRangeError",
    "PlaneError",
    "ShapeError",
    "SidecarParseError",
    "TrainingError",
    "UndefinedFractionError",
    "UsageError",
]
