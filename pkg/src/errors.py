"""Exception hierarchy for the lab."""

from typing import Any, Optional


class LabError(Exception):
    """Base class for all lab errors."""


class DomainError(LabError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class ConfigurationError(LabError, ValueError):
    """Model or run parameters that the requested operation cannot handle."""


class NumericError(LabError, RuntimeError):
    """An iterative method failed to converge or produced non-finite values."""

    def __init__(self, message: str, last_residual: Optional[float] = None, snapshot: Any = None):
        super().__init__(message)
        self.last_residual = last_residual
        self.snapshot = snapshot


class CFLViolationError(NumericError):
    """A finite-volume step produced a negative cell."""


class OptimizerStallError(NumericError):
    """Backtracking was exhausted without decreasing the objective."""
