"""Custom exceptions for sslkit."""

from typing import Any, Optional, Sequence


class SSLKitError(Exception):
    """Base exception for sslkit errors."""

    exit_code = 1

    def __init__(self, message: str, details: Optional[str] = None):
        self.message = message
        self.details = details
        super().__init__(message)


class ConfigError(SSLKitError):
    """Raised when a configuration field is outside its allowed range."""

    exit_code = 2

    def __init__(self, field: str, value: Any, reason: str):
        super().__init__(f"Invalid {field}: '{value}' - {reason}")
        self.field = field
        self.value = value
        self.reason = reason


class DataError(SSLKitError):
    """Raised when a dataset, manifest, fold plan or file cannot be used."""

    exit_code = 3

    def __init__(self, message: str, path: Optional[str] = None):
        if path is not None:
            message = f"{message} ({path})"
        super().__init__(message)
        self.path = path


class ShapeMismatchError(DataError):
    """Raised when a tensor or image does not have the expected dimensions."""

    def __init__(self, what: str, expected: Sequence[int] | int, actual: Sequence[int] | int):
        super().__init__(
            f"{what}: expected dimensions {_dims(expected)}, got {_dims(actual)}"
        )
        self.what = what
        self.expected = expected
        self.actual = actual


class CheckpointError(DataError):
    """Raised when a checkpoint file cannot be read or written."""

    def __init__(self, path: str, reason: str):
        super().__init__(f"Checkpoint error: {reason}", path)
        self.reason = reason


class RunLockedError(DataError):
    """Raised when another process holds the lock of a run directory."""

    def __init__(self, run_dir: str):
        super().__init__("Run directory is locked by another process", run_dir)
        self.run_dir = run_dir


class NumericalError(SSLKitError):
    """Raised on non-finite values and degenerate numerical inputs."""

    exit_code = 4


class NonFiniteLossError(NumericalError):
    """Raised when the training loss stops being finite."""

    def __init__(self, regime: str, epoch: int, batch: int):
        super().__init__(
            f"Non-finite {regime} loss at epoch {epoch}, batch {batch}")
        self.regime = regime
        self.epoch = epoch
        self.batch = batch


def _dims(value: Sequence[int] | int) -> str:
    if isinstance(value, int):
        return str(value)
    return "x".join(str(v) for v in value)
