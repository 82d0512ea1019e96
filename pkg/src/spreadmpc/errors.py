"""Exception hierarchy shared across the package."""


class SpreadMPCError(Exception):
    """Base class for all package errors."""


class DomainError(SpreadMPCError, ValueError):
    """Inputs violate a mathematical precondition (bounds, assumptions)."""


class NumericalError(SpreadMPCError, ArithmeticError):
    """An iterative routine failed to converge."""


class ConsistencyError(SpreadMPCError):
    """A solver result disagrees with its independent recomputation."""


class SolverError(SpreadMPCError):
    """The convex solver did not return an optimal point.

    ``dump`` carries the JSON form of the offending program when available.
    """

    def __init__(self, message, solution=None, dump=None):
        super().__init__(message)
        self.solution = solution
        self.dump = dump


class AssumptionViolation(DomainError):
    """A standing assumption of the control scheme does not hold."""
