"""Exception hierarchy shared across the package."""


class SmartMCError(Exception):
    """Base class for all package errors."""


class DomainError(SmartMCError, ValueError):
    """An input lies outside the domain of a formula or model."""


class NoSolutionError(SmartMCError, ValueError):
    """A root-finding or inversion problem has no solution for the given target."""


class CalendarArbitrageError(DomainError):
    """Total variance decreases between two maturities."""


class DegenerateVegaError(DomainError):
    """Vega is requested where it is identically zero (tau == 0)."""


class PreconditionError(SmartMCError, ValueError):
    """An operation was called with inputs violating its preconditions."""


class InfeasibleError(SmartMCError):
    """The constraint system admits no solution.

    ``labels`` carries the constraint labels of the blocks involved, when known.
    """

    def __init__(self, message: str, labels: tuple[str, ...] = ()):
        super().__init__(message)
        self.labels = labels


class SolverError(SmartMCError):
    """The numerical backend failed (iteration limit, numerical trouble)."""


class ConvergenceError(SmartMCError):
    """The outer fixed-point loop did not reach its tolerances."""

    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial
