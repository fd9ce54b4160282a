"""Exception types raised across the package."""


class ProtoquadError(Exception):
    """Base class for domain errors (CLI maps these to exit code 1)."""


class DataFormatError(ProtoquadError, ValueError):
    pass


class TrainingError(ProtoquadError):
    pass


class SingularMetricError(ProtoquadError):
    pass


class DegenerateCandidate(ProtoquadError):
    """Schur complement of a candidate against the selection fell below tolerance."""

    def __init__(self, d, tol):
        super().__init__(f"degenerate candidate: schur complement {d:.3e} <= tol {tol:.3e}")
        self.d = d
        self.tol = tol


class PoolExhausted(ProtoquadError):
    """No non-degenerate, unselected candidate remains."""


class GuardExceeded(ProtoquadError):
    """A brute-force enumeration would exceed the combinatorial budget."""


class PremiseError(ProtoquadError):
    """Inputs do not satisfy the premise of a verification routine."""
