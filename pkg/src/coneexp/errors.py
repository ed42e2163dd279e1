"""Exception types shared across the package."""


class ConeExpError(Exception):
    """Base class for all package errors."""


class BetaOutOfRange(ConeExpError):
    """Homogeneity exponent outside the integrable window (-2*alpha, N)."""


class BetaZero(ConeExpError):
    """Operation undefined at homogeneity zero."""


class ToleranceNotMet(ConeExpError):
    """Refinement stalled above the requested tolerance."""

    def __init__(self, message, value=None, error_estimate=None):
        super().__init__(message)
        self.value = value
        self.error_estimate = error_estimate


class RootNotBracketed(ConeExpError):
    """No sign change found on the scanned grid.

    Carries the scan so the caller can report it.
    """

    def __init__(self, message, scan=None):
        super().__init__(message)
        self.scan = scan if scan is not None else []


class NoConvergence(ConeExpError):
    """Iteration failed to converge; carries the last bracket/interval."""

    def __init__(self, message, interval=None):
        super().__init__(message)
        self.interval = interval


class LostPositivity(ConeExpError):
    """An iterate that must stay positive went negative beyond round-off."""


class BoundViolated(ConeExpError):
    """An a-priori bound was exceeded by more than round-off slack."""


class GridMismatch(ConeExpError):
    """Profile samples do not match the expected angular grid."""


class MissingExponents(ConeExpError):
    """A verdict was requested before the required exponents were computed."""
