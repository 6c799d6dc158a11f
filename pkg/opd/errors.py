"""Exception hierarchy shared by the numerical modules and the CLI."""


class OpdError(Exception):
    """Base class for every error raised by the opd packages."""


class DomainError(OpdError, ValueError):
    """An argument lies outside the domain of the operation."""


class ConfigurationError(OpdError, ValueError):
    """A run, loss or covariate configuration is invalid."""


class EstimationError(OpdError):
    """Parameter estimation failed.

    `trace` holds the iterations completed so far and `last` the last iterate
    the optimiser produced, so callers can report how far the fit got.
    """

    def __init__(self, message: str, trace: list | None = None, last=None):
        super().__init__(message)
        self.trace = trace or []
        self.last = last


class RankError(EstimationError):
    """The design matrix, or X'Σ⁻¹X, is singular."""


class NumericalError(OpdError, ArithmeticError):
    """A factorisation, solve or exponentiation broke down."""

    def __init__(self, message: str, log_value: float | None = None):
        super().__init__(message)
        self.log_value = log_value


class SolverError(NumericalError):
    """A root could not be bracketed."""


class CalibrationError(OpdError):
    """λ cannot be calibrated to a quantile (degenerate predictive law)."""


class ApproximationError(OpdError):
    """The delta-method correction factor is not positive."""
