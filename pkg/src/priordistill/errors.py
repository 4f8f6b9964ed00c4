"""Exception hierarchy. CLI exit codes hang off these classes."""

from __future__ import annotations


class PriorDistillError(Exception):
    exit_code = 2


class ConfigError(PriorDistillError, ValueError):
    exit_code = 1

    def __init__(self, message: str, key_path: str | None = None):
        super().__init__(f"{key_path}: {message}" if key_path else message)
        self.key_path = key_path


class DataError(PriorDistillError, ValueError):
    pass


class ShapeError(PriorDistillError, ValueError):
    pass


class NumericError(PriorDistillError, ArithmeticError):
    pass


class TrainingError(NumericError):
    def __init__(self, message: str, expert_id: int | None = None):
        super().__init__(message)
        self.expert_id = expert_id


class DegenerateWindowError(NumericError):
    """Expert window with w_start == w_target; the caller should resample."""


class EstimatorUndefinedError(PriorDistillError, ValueError):
    pass


class ClassCoverageError(PriorDistillError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class DistillationAborted(NumericError):
    """Sustained non-finite loss. ``last_good`` holds the last finite-state bundle."""

    def __init__(self, message: str, last_good=None, step: int | None = None):
        super().__init__(message)
        self.last_good = last_good
        self.step = step


class CorruptionError(PriorDistillError, IOError):
    def __init__(self, message: str, component: str | None = None):
        super().__init__(message)
        self.component = component


class IncompatibleVersionError(PriorDistillError):
    pass


class PartialResultError(PriorDistillError):
    exit_code = 3

    def __init__(self, message: str, completed: list[int], failed: list[int]):
        super().__init__(message)
        self.completed = completed
        self.failed = failed
