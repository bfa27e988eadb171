"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An argument violates a documented precondition (non-finite, bad shape...)."""


class SingularMatrixError(ArithmeticError):
    """A linear solve hit a matrix that is singular to working tolerance."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared during evaluation or differentiation."""


class WellPosednessError(ArithmeticError):
    """The algebraic-loop Jacobian I - dg/dz is singular to tolerance.

    Unreachable for models built through the well-posed parametrization; its
    occurrence signals a bug or a hand-built ill-posed model.
    """


class DivergenceError(ArithmeticError):
    """Simulation produced a non-finite state."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"non-finite state at step {step}")


class ConfigError(ValueError):
    """A run configuration is inconsistent or incomplete."""


class DataFormatError(ValueError):
    """A dataset file could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
