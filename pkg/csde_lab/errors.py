"""
Exception hierarchy for the CSDE laboratory.

Every error carries the exit code the command-line front end reports for it:
2 for configuration / invalid input, 3 for numerical trouble.
"""

from typing import Optional


class CsdeLabError(Exception):
    """Base class for all laboratory errors."""

    exit_code = 2


class InvalidInputError(CsdeLabError, ValueError):
    """An argument violates a documented precondition."""


class ConfigError(InvalidInputError):
    """An experiment config is malformed or names something unknown."""


class CutLocusError(InvalidInputError):
    """A log map was requested too close to the cut locus."""

    def __init__(self, distance: float, limit: float):
        self.distance = float(distance)
        self.limit = float(limit)
        super().__init__(
            f"Points are at distance {self.distance:.6f}, "
            f"at or beyond the cut-locus guard {self.limit:.6f}"
        )


class OutOfRangeError(InvalidInputError):
    """A time or radius lies outside the certified range of a routine."""


class UnsupportedError(InvalidInputError):
    """The requested combination of model, drift and target is not available."""


class UnderpoweredError(InvalidInputError):
    """A statistical test was given too few samples."""


class BinningError(InvalidInputError):
    """A chi-square cell has fewer than five expected counts."""


class BoundaryError(InvalidInputError):
    """A radial quantity was evaluated on or beyond the absorbing sphere."""


class NumericalError(CsdeLabError, ArithmeticError):
    """A computation produced NaN/inf or otherwise broke down."""

    exit_code = 3

    def __init__(self, message: str, step: Optional[int] = None):
        self.step = step
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)


class DegenerateInputError(NumericalError):
    """All importance weights vanished."""


class ResolutionError(NumericalError):
    """A grid is too coarse for the Crank-Nicolson solve to be trusted."""
