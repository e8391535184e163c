"""Exception hierarchy.

Input problems derive from :class:`CaseError` (CLI exit code 2); numerical
failures derive from :class:`SolverError` (CLI exit code 1).
"""


class MarginalStateError(Exception):
    pass


class CaseError(MarginalStateError, ValueError):
    """Malformed or inconsistent input."""


class SolverError(MarginalStateError):
    pass


class MaxIterationsError(SolverError):
    pass


class DampingFloorError(SolverError):
    """Step halving reached its floor without reducing the mismatch."""


class SingularJacobianError(SolverError):
    pass


class NotMarginalError(SolverError):
    pass


class NotLosslessError(MarginalStateError, ValueError):
    pass


class RefinementDivergedError(SolverError):
    def __init__(self, message, fallback=None):
        super().__init__(message)
        self.fallback = fallback


class BaseCaseInfeasibleError(SolverError):
    pass


class NoProgressBeforeFloorError(SolverError):
    pass
