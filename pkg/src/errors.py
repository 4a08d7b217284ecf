"""Exception hierarchy.

Everything raised on purpose by spikelab derives from SpikeLabError. The two
families map onto CLI exit codes: InvalidParameterError / InputFormatError
exit with 2, NumericalError exits with 3.
"""

from __future__ import annotations


class SpikeLabError(Exception):
    """Base class for all spikelab errors."""


# --- Invalid input ---

class InvalidParameterError(SpikeLabError, ValueError):
    """A parameter is outside its allowed range."""


class InvalidDimensionError(InvalidParameterError):
    """Dimension p (or n) too small or inconsistent with a model."""


class ConfigError(InvalidParameterError):
    """Experiment configuration is malformed or inconsistent."""


class InputFormatError(SpikeLabError, ValueError):
    """Input file is malformed. `line` is 1-based, or None if unknown."""

    def __init__(self, message: str, line: int | None = None) -> None:
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


# --- Numerical failures ---

class NumericalError(SpikeLabError, ArithmeticError):
    """A numerical procedure failed to produce a trustworthy value."""


class RootFindingError(NumericalError):
    """Root-finder failed. `bracket` holds the last (lo, hi) tried."""

    def __init__(self, message: str, bracket: tuple[float, float] | None = None) -> None:
        if bracket is not None:
            message = f"{message} (bracket [{bracket[0]:.6g}, {bracket[1]:.6g}])"
        super().__init__(message)
        self.bracket = bracket


class SingularityError(NumericalError):
    """Spike value sits on an atom of the bulk measure."""


class DomainError(NumericalError):
    """Lambda lies inside (or within the edge margin of) the bulk support."""


class BranchAmbiguityError(NumericalError):
    """More than one admissible Stieltjes branch. `roots` lists them."""

    def __init__(self, message: str, roots: tuple[float, ...]) -> None:
        super().__init__(f"{message}: roots {', '.join(f'{r:.12g}' for r in roots)}")
        self.roots = roots


class InversionError(NumericalError):
    """Companion transform vanished, so alpha = -1/m is undefined."""


class SingularResolventError(NumericalError):
    """Lambda is an eigenvalue of the resolvent argument."""


class DegenerateScaleError(NumericalError):
    """Truncation left a constant matrix; cannot rescale."""


class EstimationDegenerateError(NumericalError):
    """No eigenvalue passes the ratio filter of the plug-in estimator."""


class ReplicationAbortError(NumericalError):
    """Too many replications failed in a Monte Carlo run."""
