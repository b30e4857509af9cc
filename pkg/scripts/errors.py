#!/usr/bin/env python3
"""
Error Types
===========

Every failure raised by the population-control modules derives from
PopulationControlError. Each class carries the CLI exit code it maps to:

    2 - precondition / configuration / domain violations
    3 - numerical solver failures
    4 - I/O (plain OSError is mapped to 4 by run.py)
"""

from typing import Optional


class PopulationControlError(Exception):
    """Base class for all toolkit errors."""

    exit_code: int = 3


class DomainError(PopulationControlError, ValueError):
    """An argument lies outside its mathematical domain (e.g. age > A)."""

    exit_code = 2


class ShapeError(PopulationControlError, ValueError):
    """Array shapes or grids do not match."""

    exit_code = 2


class ConfigError(PopulationControlError, ValueError):
    """Scenario file could not be parsed or validated."""

    exit_code = 2


class PreconditionError(PopulationControlError):
    """A hypothesis of a controllability result is violated.

    citation names the result whose hypothesis failed; witness_norm is set when
    the obstruction could be measured (short horizons).
    """

    exit_code = 2

    def __init__(self, message: str, citation: str = "", witness_norm: Optional[float] = None):
        super().__init__(message)
        self.citation = citation
        self.witness_norm = witness_norm

    def __str__(self) -> str:
        text = super().__str__()
        if self.citation:
            text = f"{text} [{self.citation}]"
        if self.witness_norm is not None:
            text = f"{text} (witness norm {self.witness_norm:.6e})"
        return text


class NoRootError(PopulationControlError):
    """The Lotka characteristic equation has no real root (R = 0)."""


class ConvergenceError(PopulationControlError):
    """An iterative method exhausted its iteration cap."""


class RiccatiDivergenceError(PopulationControlError):
    """The Riccati march blew up; a smaller step is needed."""


class SpectrumOverlapError(PopulationControlError):
    """The Lyapunov/Sylvester operator is singular."""


class DichotomyError(PopulationControlError):
    """No Lyapunov orientation block-diagonalises the Hamiltonian."""


class KKTError(PopulationControlError):
    """The KKT saddle-point system could not be factorised."""


class StaticSingularityError(PopulationControlError):
    """The static optimality system is singular (reproduction number 1)."""
