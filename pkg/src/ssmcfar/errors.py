"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates a documented precondition."""


class NumericError(ArithmeticError):
    """Raised when a computation produces a non-finite value."""

    def __init__(self, message, op=None):
        super().__init__(message)
        self.op = op


class SingularityError(NumericError):
    """Raised when ``I - dt/2 * A`` cannot be inverted."""

    def __init__(self, dt):
        super().__init__(f"I - dt/2*A is singular for dt={dt!r}", op="discretize_bilinear")
        self.dt = dt


class CalibrationError(RuntimeError):
    """Raised when a CFAR threshold search fails to converge."""
