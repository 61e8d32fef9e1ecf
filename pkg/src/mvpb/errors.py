"""Exception types shared across the package."""


class MvpbError(Exception):
    """Base class for all package-specific errors."""


class DataInsufficiencyError(MvpbError):
    """Too few studies (or observed outcomes) for the requested computation."""


class DegenerateDesignError(MvpbError):
    """Regression design is rank deficient (e.g. constant precision)."""


class DegenerateRankingError(MvpbError):
    """Rank statistic undefined because every pair is tied."""


class BoundaryDegeneracyError(MvpbError):
    """A covariance matrix is singular at a correlation boundary."""


class NonConvergenceError(MvpbError):
    """Optimizer failed to converge. Carries the last iterate, if any."""

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class IterationLimitError(MvpbError):
    """Iterative procedure hit its round limit without stabilizing."""


class CovarianceUnavailableError(MvpbError):
    """A required within-study correlation is missing."""


class SingularInformationError(MvpbError):
    """Observed information matrix is singular; score test undefined."""


class SurvivorShortfallError(MvpbError):
    """Selection left fewer studies than requested, even after retries."""


class IngestError(MvpbError):
    """Input file unreadable, malformed, or empty after validation."""

    def __init__(self, message, rejected=None):
        super().__init__(message)
        self.rejected = tuple(rejected or ())


class ConfigError(MvpbError):
    """Invalid combination of configuration options."""
