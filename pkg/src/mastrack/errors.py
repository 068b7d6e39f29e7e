"""Exception types raised across the package."""


class MastrackError(Exception):
    """Base class for all package errors."""


class TopologyError(MastrackError, ValueError):
    """Malformed adjacency / leader-link data."""


class NoSpanningTreeError(TopologyError):
    """The pinned matrix L + D is singular, so no coupling gain exists."""


class ClassificationDomainError(MastrackError, ValueError):
    """Matrix has a positive off-diagonal entry and is outside Z_n."""


class ScheduleError(MastrackError, ValueError):
    """Invalid switching or communication schedule, or query outside the horizon."""


class CertificateError(MastrackError, ValueError):
    """A certificate matrix is malformed (asymmetric, indefinite, singular)."""


class SynthesisInfeasible(MastrackError):
    """LMI search ran out of budget without reaching the feasibility tolerance.

    ``block`` names the failing inequality, ``lambda_max`` is the best value
    reached and ``best`` carries the best-effort gain set (may be ``None``).
    """

    def __init__(self, block, lambda_max, best=None, message=None):
        self.block = block
        self.lambda_max = float(lambda_max)
        self.best = best
        super().__init__(
            message or f"LMI {block} infeasible: best lambda_max = {self.lambda_max:.6g}"
        )


class DivergenceError(MastrackError):
    """Simulation state became non-finite or exceeded the divergence threshold."""

    def __init__(self, message, trace=None):
        self.trace = trace
        super().__init__(message)


class ConfigError(MastrackError, ValueError):
    """Scenario configuration failed validation."""
