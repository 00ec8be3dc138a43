"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's precondition."""


class InvariantViolation(RuntimeError):
    """Raised when a stored artifact or computed result breaks a data invariant."""
