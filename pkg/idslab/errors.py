"""
Error types for IDS Lab
Every failure raised by the package derives from LabError
"""

from typing import Optional


class LabError(Exception):
    """Base class for all IDS Lab failures"""


class DomainError(LabError, ValueError):
    """Argument outside its mathematical domain"""


class ShapeError(LabError, ValueError):
    """Latent shapes do not agree"""


class ConditionError(LabError, ValueError):
    """Unknown or unsupported condition label"""


class DataError(LabError, ValueError):
    """Training data missing or malformed"""


class MetricUnsupportedError(LabError, ValueError):
    """Metric cannot be evaluated on the given latent shape"""


class SingularityError(LabError, ArithmeticError):
    """Formula evaluated where the schedule makes it singular"""


class UsageError(LabError):
    """API called in a way its contract forbids"""


class ReplayError(LabError):
    """Noise record does not match the replay request"""


class DivergenceError(LabError, ArithmeticError):
    """Iteration produced non-finite or exploding values"""

    def __init__(self, message: str, iteration: Optional[int] = None, task_id: Optional[str] = None):
        super().__init__(message)
        self.iteration = iteration
        self.task_id = task_id

    def __str__(self) -> str:
        base = super().__str__()
        if self.task_id is not None:
            return f"{base} (task {self.task_id})"
        return base


class ConfigError(LabError):
    """Experiment config violates the schema"""

    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(message)
        self.line = line

    def __str__(self) -> str:
        base = super().__str__()
        if self.line is not None:
            return f"line {self.line}: {base}"
        return base
