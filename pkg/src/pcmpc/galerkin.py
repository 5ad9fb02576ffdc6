"""Galerkin projection of uncertain linear dynamics onto a polynomial basis.

The plant ``x+ = A(theta) x + B(theta) u + F w`` with polynomial dependence
on uncertain parameters is lifted to a deterministic-in-theta recursion on
expansion coefficients.  Stacking per-state coefficient blocks of size
``p + 1`` gives

    PHI+ = bigA PHI + bigB PI + bigF w,

with ``bigA = sum_k A_k (x) Psi_k`` (Kronecker products against the triple
product matrices), ``bigB`` alike, and ``bigF = F (x) e1`` injecting additive
noise into the constant coefficient of each state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .basis import PolyBasis, TripleProductTensor, triple_products
from .distributions import MarginalDistribution
from .errors import DegreeOverflowError, ParameterError

__all__ = [
    "PolynomialMatrix",
    "UncertainLinearSystem",
    "GpcDynamics",
    "LiftedPolicy",
    "project_system",
    "lift_state",
    "lift_policy",
]


@dataclass(frozen=True)
class PolynomialMatrix:
    """Matrix whose entries are polynomials in the uncertain parameters.

    Stored as a sum of monomials: ``terms`` maps each power multi-index to a
    constant coefficient matrix, so evaluation is
    ``sum(theta**powers * coeff)``.
    """

    shape: tuple[int, int]
    n_params: int
    terms: tuple  # ((powers, coeff_matrix), ...) sorted for determinism

    def __post_init__(self):
        for powers, coeff in self.terms:
            if len(powers) != self.n_params:
                raise ParameterError(
                    f"power tuple {powers} does not match {self.n_params} parameters"
                )
            if coeff.shape != self.shape:
                raise ParameterError("coefficient matrix shape mismatch")

    @classmethod
    def constant(cls, matrix, n_params: int) -> "PolynomialMatrix":
        matrix = np.asarray(matrix, dtype=float)
        return cls.from_entries(
            [
                [[((0,) * n_params, matrix[i, j])] for j in range(matrix.shape[1])]
                for i in range(matrix.shape[0])
            ],
            n_params=n_params,
        )

    @classmethod
    def from_entries(cls, entries, n_params: int) -> "PolynomialMatrix":
        """Build from per-entry term lists.

        ``entries[i][j]`` is a list of ``(powers, coefficient)`` pairs; an
        empty list means the entry is zero.
        """
        rows = len(entries)
        cols = len(entries[0]) if rows else 0
        if any(len(r) != cols for r in entries):
            raise ParameterError("ragged entry table")
        by_power: dict[tuple, np.ndarray] = {}
        for i, row in enumerate(entries):
            for j, entry in enumerate(row):
                for powers, coeff in entry:
                    powers = tuple(int(p) for p in powers)
                    if any(p < 0 for p in powers):
                        raise ParameterError(f"negative power in {powers}")
                    mat = by_power.setdefault(powers, np.zeros((rows, cols)))
                    mat[i, j] += float(coeff)
        terms = []
        for powers in sorted(by_power, key=lambda t: (sum(t), t[::-1])):
            mat = by_power[powers]
            mat.setflags(write=False)
            terms.append((powers, mat))
        if not terms:
            zero = np.zeros((rows, cols))
            zero.setflags(write=False)
            terms.append(((0,) * n_params, zero))
        return cls(shape=(rows, cols), n_params=n_params, terms=tuple(terms))

    def degree(self, active_dims: Sequence[int] | None = None) -> int:
        """Max total degree, optionally counting only the given dimensions."""
        dims = range(self.n_params) if active_dims is None else active_dims
        return max(sum(powers[d] for d in dims) for powers, _ in self.terms)

    def __call__(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).reshape(self.n_params)
        out = np.zeros(self.shape)
        for powers, coeff in self.terms:
            out += np.prod(theta**np.array(powers)) * coeff
        return out

    def eval_batch(self, thetas) -> np.ndarray:
        """Evaluate at many parameter points: (S, n_params) -> (S, rows, cols)."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        monomials = np.ones((thetas.shape[0], len(self.terms)))
        for t, (powers, _) in enumerate(self.terms):
            for d, p in enumerate(powers):
                if p:
                    monomials[:, t] *= thetas[:, d] ** p
        coeffs = np.stack([c for _, c in self.terms])
        return np.einsum("st,tij->sij", monomials, coeffs)

    def entry_terms(self, i: int, j: int) -> list:
        """Term list of one entry, for round trips with config files."""
        return [
            (powers, coeff[i, j])
            for powers, coeff in self.terms
            if coeff[i, j] != 0.0
        ]


@dataclass(frozen=True)
class UncertainLinearSystem:
    """Discrete-time plant with polynomial parameter dependence.

    ``x+ = a_matrix(theta) x + b_matrix(theta) u + noise_gain w`` with
    ``w ~ N(0, noise_cov)`` i.i.d. and ``theta`` distributed per ``marginals``.
    """

    a_matrix: PolynomialMatrix
    b_matrix: PolynomialMatrix
    noise_gain: np.ndarray
    noise_cov: np.ndarray
    marginals: tuple[MarginalDistribution, ...]

    def __post_init__(self):
        F = np.asarray(self.noise_gain, dtype=float)
        S = np.asarray(self.noise_cov, dtype=float)
        n_x = self.a_matrix.shape[0]
        if self.a_matrix.shape != (n_x, n_x):
            raise ParameterError("state matrix must be square")
        if self.b_matrix.shape[0] != n_x:
            raise ParameterError("input matrix row count must match state dimension")
        if F.ndim != 2 or F.shape[0] != n_x:
            raise ParameterError("noise gain must be (n_x, n_w)")
        if S.shape != (F.shape[1], F.shape[1]):
            raise ParameterError("noise covariance must be (n_w, n_w)")
        if not np.allclose(S, S.T, atol=1e-12):
            raise ParameterError("noise covariance must be symmetric")
        S = 0.5 * (S + S.T)
        if S.size and np.linalg.eigvalsh(S).min() < -1e-12:
            raise ParameterError("noise covariance must be positive semidefinite")
        n_theta = len(self.marginals)
        if self.a_matrix.n_params != n_theta or self.b_matrix.n_params != n_theta:
            raise ParameterError("polynomial matrices must use one power per marginal")
        F.setflags(write=False)
        S.setflags(write=False)
        object.__setattr__(self, "noise_gain", F)
        object.__setattr__(self, "noise_cov", S)
        object.__setattr__(self, "marginals", tuple(self.marginals))

    @property
    def n_x(self) -> int:
        return self.a_matrix.shape[0]

    @property
    def n_u(self) -> int:
        return self.b_matrix.shape[1]

    @property
    def n_w(self) -> int:
        return self.noise_gain.shape[1]

    @property
    def n_theta(self) -> int:
        return len(self.marginals)


@dataclass(frozen=True)
class GpcDynamics:
    """Lifted coefficient dynamics produced by :func:`project_system`."""

    basis: PolyBasis
    triples: TripleProductTensor
    a_coeffs: np.ndarray  # (p+1, n_x, n_x) projection matrices of A(theta)
    b_coeffs: np.ndarray  # (p+1, n_x, n_u)
    big_a: np.ndarray
    big_b: np.ndarray
    big_f: np.ndarray
    noise_cov: np.ndarray
    n_x: int
    n_u: int
    lifted_noise_cov: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.lifted_noise_cov is None:
            lifted = self.big_f @ self.noise_cov @ self.big_f.T
            lifted = 0.5 * (lifted + lifted.T)
            lifted.setflags(write=False)
            object.__setattr__(self, "lifted_noise_cov", lifted)

    @property
    def n_terms(self) -> int:
        return self.basis.n_terms

    @property
    def n(self) -> int:
        """Lifted state dimension n_x (p+1)."""
        return self.n_x * self.basis.n_terms

    @property
    def r(self) -> int:
        """Lifted input dimension n_u (p+1)."""
        return self.n_u * self.basis.n_terms

    @property
    def noise_gain(self) -> np.ndarray:
        """Physical noise matrix; the lifted one only feeds constant terms."""
        return self.big_f[:: self.basis.n_terms, :]


def project_system(
    system: UncertainLinearSystem,
    basis: PolyBasis,
    triples: TripleProductTensor | None = None,
) -> GpcDynamics:
    """Project the plant matrices onto the basis and assemble lifted operators.

    Raises :class:`DegreeOverflowError` if any entry's degree (counted over
    non-degenerate parameter dimensions, where quadrature exactness matters)
    exceeds the basis degree, since projection would then truncate.
    """
    if len(system.marginals) != basis.n_dims:
        raise ParameterError("system and basis disagree on the number of parameters")
    if system.marginals != basis.marginals:
        raise ParameterError("system and basis marginals differ")
    active = [d for d in range(basis.n_dims) if d not in basis.degenerate_dims]
    for name, pm in (("A", system.a_matrix), ("B", system.b_matrix)):
        deg = pm.degree(active_dims=active)
        if deg > basis.max_degree:
            raise DegreeOverflowError(
                f"{name}(theta) has degree {deg} > basis degree {basis.max_degree}; "
                "projection would not be exact"
            )
    if triples is None:
        triples = triple_products(basis)

    a_coeffs = _project_matrix(system.a_matrix, basis)
    b_coeffs = _project_matrix(system.b_matrix, basis)

    p1 = basis.n_terms
    big_a = sum(np.kron(a_coeffs[k], triples.psi[k]) for k in range(p1))
    big_b = sum(np.kron(b_coeffs[k], triples.psi[k]) for k in range(p1))
    e1 = np.zeros((p1, 1))
    e1[0, 0] = 1.0
    big_f = np.kron(system.noise_gain, e1)

    for arr in (a_coeffs, b_coeffs, big_a, big_b, big_f):
        arr.setflags(write=False)
    return GpcDynamics(
        basis=basis,
        triples=triples,
        a_coeffs=a_coeffs,
        b_coeffs=b_coeffs,
        big_a=big_a,
        big_b=big_b,
        big_f=big_f,
        noise_cov=system.noise_cov,
        n_x=system.n_x,
        n_u=system.n_u,
    )


def _project_matrix(pm: PolynomialMatrix, basis: PolyBasis) -> np.ndarray:
    vals = pm.eval_batch(basis.theta_nodes)  # (n_grid, rows, cols)
    return (
        np.einsum("g,gk,gij->kij", basis.weights, basis.node_terms, vals)
        / basis.norms[:, None, None]
    )


def lift_state(x, basis: PolyBasis) -> np.ndarray:
    """Embed a known state as expansion coefficients: x (x) e1."""
    x = np.asarray(x, dtype=float).ravel()
    out = np.zeros(x.size * basis.n_terms)
    out[:: basis.n_terms] = x
    return out


@dataclass(frozen=True)
class LiftedPolicy:
    """Per-stage affine policy on coefficients: PI_i = bigg[i] + bigL[i] PHI_i."""

    big_gains: tuple
    big_offsets: tuple

    def __len__(self) -> int:
        return len(self.big_gains)


def lift_policy(policy, basis: PolyBasis) -> LiftedPolicy:
    """Lift per-stage gains/offsets on states to coefficient space.

    ``policy`` exposes sequences ``gains`` (each n_u x n_x) and ``offsets``
    (each n_u).  The lifted gain ``L (x) I`` applies L term-by-term; the
    lifted offset ``g (x) e1`` acts on constant coefficients only.
    """
    p1 = basis.n_terms
    eye = np.eye(p1)
    e1 = np.zeros(p1)
    e1[0] = 1.0
    big_gains = []
    big_offsets = []
    for L, g in zip(policy.gains, policy.offsets):
        bl = np.kron(np.asarray(L, dtype=float), eye)
        bg = np.kron(np.asarray(g, dtype=float).ravel(), e1)
        bl.setflags(write=False)
        bg.setflags(write=False)
        big_gains.append(bl)
        big_offsets.append(bg)
    return LiftedPolicy(big_gains=tuple(big_gains), big_offsets=tuple(big_offsets))
