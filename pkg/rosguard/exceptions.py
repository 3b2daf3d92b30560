"""Errors raised by rosguard."""


class RosGuardError(Exception):
    """Base class for every error raised by the package."""


class RankDeficient(RosGuardError):
    """The system matrix does not have full column rank."""

    def __init__(self, smallest: float, largest: float, rank_tol: float):
        self.smallest = smallest
        self.largest = largest
        self.rank_tol = rank_tol
        super().__init__(
            f"H is rank deficient: smallest singular value {smallest:.3e} < "
            f"{rank_tol:.1e} * largest ({largest:.3e})"
        )


class DimMismatch(RosGuardError):
    """An array does not have the dimension the model expects."""

    def __init__(self, what: str, expected, got):
        self.what = what
        self.expected = expected
        self.got = got
        super().__init__(f"{what}: expected dimension {expected}, got {got}")


class Unbounded(RosGuardError):
    """A polyhedral set is unbounded (in a direction, or altogether)."""


class InfeasibleDual(RosGuardError):
    """A dual certificate violates p >= 0 or D^T p = mu."""


class TooLarge(RosGuardError):
    """Exhaustive enumeration was requested for too many coordinates."""

    def __init__(self, M: int, cap: int):
        self.M = M
        self.cap = cap
        super().__init__(f"brute-force enumeration supports M <= {cap}, got M = {M}")


class Diverged(RosGuardError):
    """The first-order solver loss blew up."""


class AlreadyFired(RosGuardError):
    """A detector was updated after it had already raised an alarm."""


class RankRetryExhausted(RosGuardError):
    """Random system generation kept producing rank-deficient matrices."""


class ScenarioError(RosGuardError):
    """A scenario could not be built or resolved."""


class SolverFailure(RosGuardError):
    """The conic backend returned a status we cannot use."""


class ReportError(RosGuardError):
    """Writing an output file failed."""

    def __init__(self, path, reason):
        self.path = str(path)
        super().__init__(f"failed to write {self.path}: {reason}")
