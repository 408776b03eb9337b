"""Exception hierarchy for HMFN.

Library code raises these; the CLI maps them to exit codes
(0 success, 1 contract/validation failure, 2 I/O failure).
"""

from pathlib import Path
from typing import Any


class HMFNError(Exception):
    """Base class for every error raised by the package."""

    exit_code = 1


class DimensionError(HMFNError, ValueError):
    """Raised when tensor or grid shapes are incompatible."""

    pass


class ContractError(HMFNError):
    """Raised when a caller breaks an operation's precondition."""

    pass


class ConfigError(HMFNError, ValueError):
    """Raised for invalid or inconsistent configuration."""

    pass


class GenerationError(HMFNError):
    """Raised when a synthetic scene cannot be generated."""

    pass


class CalibrationError(HMFNError):
    """Raised when crowd calibration cannot reach its tolerance.

    Attributes:
        best_stats: Density statistics of the best candidate found.
        best_model: The crowd model that produced ``best_stats``.
    """

    def __init__(self, message: str, best_stats: Any = None, best_model: Any = None):
        super().__init__(message)
        self.best_stats = best_stats
        self.best_model = best_model


class StatsError(HMFNError):
    """Raised when dataset statistics are undefined (e.g. zero frames)."""

    pass


class DatasetValidationError(HMFNError):
    """Raised when dataset tables break referential or chain invariants."""

    def __init__(self, message: str, violations: list | None = None):
        super().__init__(message)
        self.violations = violations or []


class StorageError(HMFNError):
    """Raised on file-system failures; always names the offending path."""

    exit_code = 2

    def __init__(self, message: str, path: str | Path | None = None):
        if path is not None:
            message = f"{message} ({path})"
        super().__init__(message)
        self.path = path


class DatasetIOError(StorageError):
    """Raised when dataset tables or payloads cannot be read or written."""

    pass


class CheckpointError(StorageError):
    """Raised when a weight checkpoint is missing, truncated, or malformed."""

    pass
