"""Exception types raised across the pipeline."""

from __future__ import annotations


class DragForgeError(Exception):
    """Base class for every error raised by dragforge."""


class DegenerateShapeError(DragForgeError, ValueError):
    """Shape parameters describe a curve with zero or negative thickness."""


class OutOfBoundsError(DragForgeError, ValueError):
    """A curve or region does not fit strictly inside the grid."""


class GeometryError(DragForgeError, ValueError):
    """A mask is incompatible with the flow domain."""


class DivergenceError(DragForgeError, ArithmeticError):
    """Non-finite values appeared during a simulation or a training run."""

    def __init__(self, message: str, trace=None, steps_run: int | None = None):
        super().__init__(message)
        self.trace = trace
        self.steps_run = steps_run


class ParseError(DragForgeError, ValueError):
    """Malformed input file; ``line`` is 1-based."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class EmptyDatasetError(DragForgeError, ValueError):
    """A dataset has no usable samples."""


class SingularFitError(DragForgeError, ArithmeticError):
    """The least-squares design matrix is rank deficient."""


class ScheduleExhaustedError(DragForgeError, RuntimeError):
    """Every candidate step size diverged."""


class NoViableRunError(DragForgeError, RuntimeError):
    """No training run finished without diverging."""


class InfeasibleConstraintError(DragForgeError, ValueError):
    """No shape in the sampling box can enclose the required region."""
