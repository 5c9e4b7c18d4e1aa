"""
Exception hierarchy for lca-lab.
Argument problems are ValueErrors, numerical breakdowns are ArithmeticErrors.
"""

from typing import Optional


class LcaLabError(Exception):
    """Base class for every error raised by lca-lab."""


class InvalidArgumentError(LcaLabError, ValueError):
    """An argument is outside the domain of the operation."""


class PreconditionViolatedError(InvalidArgumentError):
    """A documented precondition of a check does not hold for the given inputs."""


class EnumerationTooLargeError(InvalidArgumentError):
    """Brute-force enumeration would exceed the configured support cap."""


class InsufficientDataError(LcaLabError, ValueError):
    """Not enough usable samples to compute a statistic."""


class ConfigError(InvalidArgumentError):
    """Experiment configuration is missing, malformed or inconsistent."""


class NumericFailureError(LcaLabError, ArithmeticError):
    """
    A simulation or factorization produced unusable numbers.

    Args:
        message: Human readable description
        t: Simulation time at which the failure was detected, if known
    """

    def __init__(self, message: str, t: Optional[float] = None):
        if t is not None:
            message = f"{message} (t={t:.6g})"
        super().__init__(message)
        self.t = t


class DivergenceSuspectedError(NumericFailureError):
    """Too many switch events; the trajectory is probably chattering."""


class SingularSystemError(NumericFailureError):
    """A Gram submatrix is numerically rank deficient."""
