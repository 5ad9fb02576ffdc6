"""Marginal distributions for uncertain parameters.

Each marginal carries the link between a physical parameter ``theta`` and a
standardized variable ``s`` for which a classical orthogonal polynomial
family exists:

* ``uniform``  -> Legendre polynomials, s on [-1, 1]
* ``gaussian`` -> probabilists' Hermite polynomials, s on the real line
* ``beta4``    -> Jacobi polynomials, s on [-1, 1]

The four-parameter beta ``beta4(lo, hi, alpha, beta)`` is a standard
Beta(alpha, beta) variable rescaled to the support [lo, hi].  Its density in
the standardized variable is proportional to ``(1-s)^(beta-1) (1+s)^(alpha-1)``,
i.e. a Jacobi weight with parameters ``a = beta - 1`` and ``b = alpha - 1``.

All Gauss rules returned here are normalized so the weights sum to one,
which makes every quadrature an expectation against the marginal's law.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import hermite_e, legendre
from scipy.special import eval_jacobi, roots_jacobi

from .errors import ParameterError

_KINDS = ("uniform", "gaussian", "beta4")


@dataclass(frozen=True)
class MarginalDistribution:
    """One scalar uncertain parameter.

    ``params`` is kind-specific:
      uniform: (lower, upper)
      gaussian: (mean, variance)
      beta4: (support_lower, support_upper, shape_alpha, shape_beta)

    Use the classmethod constructors rather than building instances directly.
    A uniform marginal with ``lower == upper`` is accepted as a documented
    point-mass escape hatch; it only supports degree-zero bases.
    """

    kind: str
    params: tuple

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ParameterError(f"unknown marginal kind {self.kind!r}")
        p = tuple(float(v) for v in self.params)
        if not all(math.isfinite(v) for v in p):
            raise ParameterError(f"{self.kind} parameters must be finite, got {p}")
        if self.kind == "uniform":
            if len(p) != 2 or p[0] > p[1]:
                raise ParameterError(f"uniform requires lower <= upper, got {p}")
        elif self.kind == "gaussian":
            if len(p) != 2 or p[1] <= 0.0:
                raise ParameterError(f"gaussian requires variance > 0, got {p}")
        else:
            if len(p) != 4 or p[0] >= p[1] or p[2] <= 0.0 or p[3] <= 0.0:
                raise ParameterError(
                    f"beta4 requires support_lower < support_upper and positive shapes, got {p}"
                )
        object.__setattr__(self, "params", p)

    @classmethod
    def uniform(cls, lower, upper):
        return cls("uniform", (lower, upper))

    @classmethod
    def gaussian(cls, mean, variance):
        return cls("gaussian", (mean, variance))

    @classmethod
    def beta4(cls, support_lower, support_upper, shape_alpha, shape_beta):
        return cls("beta4", (support_lower, support_upper, shape_alpha, shape_beta))

    # ------------------------------------------------------------------
    # moments and support

    @property
    def degenerate(self) -> bool:
        return self.kind == "uniform" and self.params[0] == self.params[1]

    @property
    def mean(self) -> float:
        if self.kind == "uniform":
            lo, hi = self.params
            return 0.5 * (lo + hi)
        if self.kind == "gaussian":
            return self.params[0]
        lo, hi, a, b = self.params
        return lo + (hi - lo) * a / (a + b)

    @property
    def variance(self) -> float:
        if self.kind == "uniform":
            lo, hi = self.params
            return (hi - lo) ** 2 / 12.0
        if self.kind == "gaussian":
            return self.params[1]
        lo, hi, a, b = self.params
        return (hi - lo) ** 2 * a * b / ((a + b) ** 2 * (a + b + 1.0))

    # ------------------------------------------------------------------
    # physical <-> standardized variable

    def to_standard(self, theta):
        theta = np.asarray(theta, dtype=float)
        if self.kind == "gaussian":
            mu, var = self.params
            return (theta - mu) / math.sqrt(var)
        lo, hi = self.params[0], self.params[1]
        if self.degenerate:
            return np.zeros_like(theta)
        return 2.0 * (theta - lo) / (hi - lo) - 1.0

    def from_standard(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "gaussian":
            mu, var = self.params
            return mu + math.sqrt(var) * s
        lo, hi = self.params[0], self.params[1]
        return lo + 0.5 * (hi - lo) * (s + 1.0)

    # ------------------------------------------------------------------
    # sampling

    def sample(self, rng: np.random.Generator, size=None):
        """Draw from the marginal using a numpy Generator."""
        if self.kind == "uniform":
            lo, hi = self.params
            if self.degenerate:
                return lo if size is None else np.full(size, lo)
            return rng.uniform(lo, hi, size=size)
        if self.kind == "gaussian":
            mu, var = self.params
            return rng.normal(mu, math.sqrt(var), size=size)
        lo, hi, a, b = self.params
        return lo + (hi - lo) * rng.beta(a, b, size=size)

    # ------------------------------------------------------------------
    # orthogonal family in the standardized variable

    def gauss_rule(self, n_nodes: int):
        """Nodes and probability weights of the n-point Gauss rule.

        Nodes live in the standardized variable; weights sum to one so that
        ``sum(w * f(s))`` approximates ``E[f(s)]``.
        """
        if n_nodes < 1:
            raise ParameterError("quadrature needs at least one node")
        if self.degenerate:
            return np.zeros(1), np.ones(1)
        if self.kind == "uniform":
            s, w = legendre.leggauss(n_nodes)
        elif self.kind == "gaussian":
            s, w = hermite_e.hermegauss(n_nodes)
        else:
            _, _, a, b = self.params
            s, w = roots_jacobi(n_nodes, b - 1.0, a - 1.0)
        return s, w / w.sum()

    def eval_orthopoly(self, degree: int, s):
        """Evaluate the family's degree-``degree`` polynomial at points ``s``.

        Standard normalizations are used (Legendre P_k, probabilists'
        Hermite He_k, Jacobi P_k^(a,b)); norms are computed by quadrature
        downstream rather than assumed.
        """
        s = np.asarray(s, dtype=float)
        if degree == 0:
            return np.ones_like(s)
        if self.degenerate:
            raise ParameterError("point-mass marginal admits only the constant polynomial")
        if self.kind == "uniform":
            c = np.zeros(degree + 1)
            c[degree] = 1.0
            return legendre.legval(s, c)
        if self.kind == "gaussian":
            c = np.zeros(degree + 1)
            c[degree] = 1.0
            return hermite_e.hermeval(s, c)
        _, _, a, b = self.params
        return eval_jacobi(degree, b - 1.0, a - 1.0, s)
