"""Exception hierarchy shared by the library and the CLI."""


class MixfbmError(Exception):
    """Base class for all package errors."""


class ConfigError(MixfbmError):
    """Invalid or incomplete run configuration."""


class DataError(MixfbmError):
    """Malformed input data, grid mismatch or I/O failure."""


class NumericalError(MixfbmError):
    """A numerical step could not produce a trustworthy result."""


class CovarianceError(NumericalError):
    """Increment covariance matrix is not numerically positive definite."""


class KernelSolveError(NumericalError):
    def __init__(self, message, t_k=None):
        super().__init__(message)
        self.t_k = t_k


class EulerDivergenceError(NumericalError):
    """Euler scheme produced non-finite states.

    ``failures`` maps the 0-based subject index to the first step at which
    the state stopped being finite.
    """

    def __init__(self, failures):
        self.failures = dict(failures)
        subjects = ", ".join(str(i) for i in sorted(self.failures)[:10])
        super().__init__(
            f"Euler scheme diverged for {len(self.failures)} subject(s): {subjects}"
        )


class NoInformationError(NumericalError):
    """All quadratic statistics vanish, so the drift scale carries no information."""


class StudyFailure(MixfbmError):
    """Too many Monte Carlo replicates failed."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
