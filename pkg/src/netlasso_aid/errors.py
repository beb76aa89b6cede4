"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised for malformed data, inconsistent dimensions, or bad config."""


class QuotaError(InvalidInputError):
    """Raised when a split quota cannot be filled; message lists deficits."""


class SolverFailureError(RuntimeError):
    """Raised when a solver exhausts its iteration budget.

    Carries the best iterate found (``params``) and a certified upper bound
    on its objective suboptimality (``gap``).
    """

    def __init__(self, message, params=None, gap=None):
        super().__init__(message)
        self.params = params
        self.gap = gap


class DegenerateDataWarning(UserWarning):
    """Emitted when a training set is degenerate (all-identical windows)."""
