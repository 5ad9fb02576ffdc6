"""Multivariate orthogonal polynomial bases and Galerkin inner products.

A truncated expansion of total degree ``m`` over ``n`` independent marginals
has ``p + 1 = (n + m)! / (n! m!)`` terms.  Term ``k`` is the product of
one-dimensional orthogonal polynomials selected by a multi-index, and term 0
is always the constant.  Inner products are taken against the joint law of
the marginals and evaluated with a full tensor Gauss grid whose per-dimension
node count makes every triple product of basis terms exact.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .distributions import MarginalDistribution
from .errors import EvaluationError, ParameterError

__all__ = [
    "PolyBasis",
    "TripleProductTensor",
    "multi_indices",
    "build_basis",
    "basis_norms",
    "project_function",
    "expansion_moments",
    "triple_products",
]


def multi_indices(n_dims: int, max_degree: int) -> np.ndarray:
    """All multi-indices with total degree <= max_degree, graded lexicographic.

    Index 0 is the all-zeros tuple; within one total degree the first
    dimension varies slowest.
    """
    if n_dims < 1:
        raise ParameterError("need at least one dimension")
    if max_degree < 0:
        raise ParameterError("max_degree must be nonnegative")
    combos = [
        t
        for t in itertools.product(range(max_degree + 1), repeat=n_dims)
        if sum(t) <= max_degree
    ]
    combos.sort(key=lambda t: (sum(t), t[::-1]))
    return np.array(combos, dtype=np.int64)


def _default_nodes(max_degree: int) -> int:
    # smallest Gauss rule exact for products of three basis terms per dimension
    return max(1, math.ceil((3 * max_degree + 2) / 2))


@dataclass(frozen=True)
class PolyBasis:
    """Orthogonal basis over the joint law of independent marginals.

    Fields are fixed at construction: the multi-index table, squared norms
    of every term, and a tensor quadrature grid (standardized nodes, the
    matching physical nodes, probability weights, and the per-node values of
    every basis term).
    """

    marginals: tuple[MarginalDistribution, ...]
    max_degree: int
    indices: np.ndarray
    norms: np.ndarray
    nodes: np.ndarray
    theta_nodes: np.ndarray
    weights: np.ndarray
    node_terms: np.ndarray = field(repr=False)
    _dim_tables: tuple = field(repr=False)

    @property
    def n_dims(self) -> int:
        return len(self.marginals)

    @property
    def n_terms(self) -> int:
        return self.indices.shape[0]

    @property
    def degenerate_dims(self) -> tuple[int, ...]:
        return tuple(d for d, m in enumerate(self.marginals) if m.degenerate)

    def eval_terms(self, thetas) -> np.ndarray:
        """Basis matrix at physical parameter points.

        ``thetas`` is (n_points, n_dims) or a single point; returns
        (n_points, n_terms) with column k holding term k.
        """
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        if thetas.shape[1] != self.n_dims:
            raise ParameterError(
                f"expected points with {self.n_dims} coordinates, got shape {thetas.shape}"
            )
        out = np.ones((thetas.shape[0], self.n_terms))
        for d, marg in enumerate(self.marginals):
            s = marg.to_standard(thetas[:, d])
            table = np.column_stack(
                [marg.eval_orthopoly(deg, s) for deg in range(self.max_degree + 1)]
            )
            out *= table[:, self.indices[:, d]]
        return out


def build_basis(
    marginals: Sequence[MarginalDistribution],
    max_degree: int,
    nodes_per_dim: int | None = None,
) -> PolyBasis:
    """Construct the basis, its norms, and the tensor quadrature grid."""
    marginals = tuple(marginals)
    if not marginals:
        raise ParameterError("need at least one marginal")
    if max_degree < 0:
        raise ParameterError("max_degree must be nonnegative")
    for d, marg in enumerate(marginals):
        if marg.degenerate and max_degree >= 1:
            raise ParameterError(
                f"marginal {d} is a point mass; no orthogonal family exists beyond degree 0"
            )
    n_nodes = _default_nodes(max_degree) if nodes_per_dim is None else int(nodes_per_dim)
    if nodes_per_dim is not None and n_nodes < _default_nodes(max_degree):
        raise ParameterError(
            f"nodes_per_dim={n_nodes} cannot integrate triple products of degree "
            f"{max_degree} terms exactly; need at least {_default_nodes(max_degree)}"
        )

    indices = multi_indices(len(marginals), max_degree)

    dim_tables = []
    for marg in marginals:
        s, w = marg.gauss_rule(n_nodes)
        values = np.column_stack(
            [marg.eval_orthopoly(deg, s) for deg in range(max_degree + 1)]
        )
        dim_tables.append((s, w, values))

    # full tensor grid, first dimension varying slowest
    grids = [np.arange(len(t[0])) for t in dim_tables]
    mesh = np.stack(
        [g.ravel() for g in np.meshgrid(*grids, indexing="ij")], axis=1
    )
    nodes = np.column_stack([dim_tables[d][0][mesh[:, d]] for d in range(len(marginals))])
    weights = np.ones(mesh.shape[0])
    for d in range(len(marginals)):
        weights *= dim_tables[d][1][mesh[:, d]]
    theta_nodes = np.column_stack(
        [marginals[d].from_standard(nodes[:, d]) for d in range(len(marginals))]
    )

    node_terms = np.ones((mesh.shape[0], indices.shape[0]))
    for d in range(len(marginals)):
        node_terms *= dim_tables[d][2][mesh[:, d]][:, indices[:, d]]

    # per-dimension norms multiply because the marginals are independent
    norms = np.ones(indices.shape[0])
    for d in range(len(marginals)):
        _, w, values = dim_tables[d]
        nrm1d = (w[:, None] * values**2).sum(axis=0)
        norms *= nrm1d[indices[:, d]]

    for arr in (indices, norms, nodes, theta_nodes, weights, node_terms):
        arr.setflags(write=False)
    return PolyBasis(
        marginals=marginals,
        max_degree=max_degree,
        indices=indices,
        norms=norms,
        nodes=nodes,
        theta_nodes=theta_nodes,
        weights=weights,
        node_terms=node_terms,
        _dim_tables=tuple(dim_tables),
    )


def basis_norms(basis: PolyBasis) -> np.ndarray:
    """Squared norms <phi_k^2> of every basis term."""
    return basis.norms


def project_function(basis: PolyBasis, f: Callable) -> np.ndarray:
    """Galerkin coefficients of a scalar function of the physical parameters.

    ``f`` receives an (n_nodes, n_dims) array of physical points and must
    return the matching (n_nodes,) values (a scalar-valued vectorized
    callable).  Coefficients are ``<f, phi_k> / <phi_k^2>``, exact whenever
    ``f`` is a polynomial of total degree <= max_degree.
    """
    vals = np.asarray(f(basis.theta_nodes), dtype=float)
    if vals.shape != (basis.theta_nodes.shape[0],):
        vals = np.broadcast_to(vals, (basis.theta_nodes.shape[0],)).astype(float)
    if not np.all(np.isfinite(vals)):
        raise EvaluationError("function returned non-finite values at quadrature nodes")
    return (basis.node_terms.T @ (basis.weights * vals)) / basis.norms


def expansion_moments(coeffs, basis: PolyBasis):
    """Mean and variance implied by expansion coefficients.

    Mean is the constant coefficient; variance is the norm-weighted sum of
    the squared higher-order coefficients.  ``coeffs`` may be one expansion
    or a stack with terms on the last axis.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape[-1] != basis.n_terms:
        raise ParameterError(
            f"expected {basis.n_terms} coefficients on the last axis, got {coeffs.shape}"
        )
    mean = coeffs[..., 0]
    var = np.einsum("...k,k->...", coeffs[..., 1:] ** 2, basis.norms[1:])
    return mean, var


@dataclass(frozen=True)
class TripleProductTensor:
    """Normalized triple products sigma[i,j,k] = <phi_i phi_j phi_k> / <phi_i^2>.

    ``psi[k]`` is the matrix with entries ``psi[k][i, j] = sigma[i, k, j]``;
    ``psi[0]`` is the identity because term 0 is the constant.
    """

    sigma: np.ndarray
    psi: np.ndarray
    norms: np.ndarray

    @property
    def n_terms(self) -> int:
        return self.norms.shape[0]


def triple_products(basis: PolyBasis) -> TripleProductTensor:
    """Quadrature evaluation of all normalized triple products."""
    M = basis.node_terms
    raw = np.einsum("gi,gj,gk,g->ijk", M, M, M, basis.weights, optimize=True)
    sigma = raw / basis.norms[:, None, None]
    # orthogonality makes the constant-term slice the identity exactly
    sigma[:, 0, :] = np.eye(basis.n_terms)
    psi = np.ascontiguousarray(np.swapaxes(sigma, 0, 1))
    sigma.setflags(write=False)
    psi.setflags(write=False)
    return TripleProductTensor(sigma=sigma, psi=psi, norms=basis.norms)
