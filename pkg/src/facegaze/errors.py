"""Exception hierarchy shared by every facegaze module."""


class FaceGazeError(Exception):
    """Base class for all library errors."""

    #: process exit code used by the command-line front end
    exit_code = 1


class InvalidArgumentError(FaceGazeError, ValueError):
    """An argument violates an operation's precondition."""


class ValidationError(FaceGazeError, ValueError):
    """A constructed object violates one of its invariants.

    The message always names the violated invariant.
    """


class ParseError(FaceGazeError, ValueError):
    """A file could not be parsed; carries line/field diagnostics."""

    def __init__(self, message, *, path=None, line=None, field=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.path = path
        self.line = line
        self.field = field


class DegenerateGeometryError(FaceGazeError, ValueError):
    """Geometry is rank deficient or has zero measure."""


class DegenerateScenarioError(FaceGazeError, ValueError):
    """A synthetic scenario produced no usable data."""


class PreconditionError(FaceGazeError, ValueError):
    """An input is well formed but not in a usable state."""


class ExtractionError(FaceGazeError):
    """An eye region could not be extracted from a rendered image."""


class NumericalFailureError(FaceGazeError, ArithmeticError):
    """An iterative computation diverged or failed to converge."""

    exit_code = 3

    def __init__(self, message, *, iteration=None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class NoCorrespondenceError(NumericalFailureError):
    """Every robust match weight vanished, so the fit has no data term."""


class InfeasibleError(NumericalFailureError):
    """A constrained problem has no feasible point."""
