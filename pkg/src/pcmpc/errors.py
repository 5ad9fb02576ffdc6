"""Exception types shared across the package."""

from __future__ import annotations


class PcmpcError(Exception):
    """Base class for all package-specific errors."""


class ParameterError(PcmpcError, ValueError):
    """Invalid distribution, weight, or system parameter."""


class DegreeOverflowError(PcmpcError, ValueError):
    """A polynomial entry exceeds the degree the basis can project exactly."""


class EvaluationError(PcmpcError, ValueError):
    """A user-supplied function returned non-finite values at quadrature nodes."""


class ConditioningError(PcmpcError):
    """A linear solve or factorization failed due to ill conditioning."""


class QpInfeasibleError(PcmpcError):
    """The quadratic program has no feasible point.

    Carries a max-violation report: the row index of the most violated
    constraint at the least-infeasible point found and its violation.
    """

    def __init__(self, message, row=None, violation=None):
        super().__init__(message)
        self.row = row
        self.violation = violation


class SmpcInfeasibleError(PcmpcError):
    """The chance-constrained program is infeasible.

    Carries the stage and constraint index of the most violated
    tightened constraint together with its value.
    """

    def __init__(self, message, stage=None, constraint=None, value=None):
        super().__init__(message)
        self.stage = stage
        self.constraint = constraint
        self.value = value


class CertificateError(PcmpcError):
    """Stability certificate construction failed (e.g. unstable closed loop)."""

    def __init__(self, message, spectral_radius=None):
        super().__init__(message)
        self.spectral_radius = spectral_radius


class ConfigError(PcmpcError, ValueError):
    """Experiment configuration failed validation.

    ``path`` points at the offending field, e.g. ``controller.constraints[0].beta``.
    """

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
