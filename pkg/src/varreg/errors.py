"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain where an operation is defined."""


class NonconvexError(DomainError):
    """A convex-analysis operation was requested for a nonconvex penalty."""


class ConstraintError(ValueError):
    """A diffusion coefficient violates the lower bound ``a >= c_lower``."""


class PreconditionError(ValueError):
    """A precondition of an error estimate (e.g. ``c * ||omega|| < 1``) fails."""


class ConfigError(ValueError):
    """An experiment configuration is malformed or inconsistent."""


class SolverError(RuntimeError):
    """The optimizer produced a non-finite objective or failed otherwise."""

    def __init__(self, message, iterate=None):
        super().__init__(message)
        self.iterate = iterate
