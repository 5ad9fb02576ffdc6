"""Closed-form moment propagation for the lifted coefficient process.

Under an affine per-stage policy the coefficient vector is Gaussian at every
stage (it is a linear image of the Gaussian noise), so its mean and
covariance follow the standard recursions

    mean+ = (bigA + bigB L) mean + bigB g
    cov+  = (bigA + bigB L) cov (.)^T + bigF Sigma bigF^T.

State-space moments are recovered through the basis norms: the mean of each
state is its constant coefficient, and second moments combine the outer
product of mean coefficients with the matching diagonal blocks of the
coefficient covariance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import PolyBasis
from .errors import ParameterError
from .galerkin import GpcDynamics, LiftedPolicy

__all__ = [
    "MomentState",
    "MomentTrajectory",
    "propagate",
    "state_mean",
    "state_second_moment",
    "state_variance",
]

_EIG_FLOOR = -1e-10


@dataclass(frozen=True)
class MomentState:
    """Mean and covariance of the lifted coefficient vector at one stage.

    The covariance is symmetrized on construction; eigenvalues down to
    -1e-10 are tolerated and clamped to zero, anything lower is rejected.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).ravel()
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise ParameterError(
                f"covariance shape {cov.shape} does not match mean of size {mean.size}"
            )
        cov = 0.5 * (cov + cov.T)
        w, V = np.linalg.eigh(cov)
        if w.min() < _EIG_FLOOR:
            raise ParameterError(
                f"covariance has eigenvalue {w.min():.3e} below the {_EIG_FLOOR} floor"
            )
        if w.min() < 0.0:
            cov = (V * np.clip(w, 0.0, None)) @ V.T
            cov = 0.5 * (cov + cov.T)
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def n(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class MomentTrajectory:
    """Moment states for stages 0..N."""

    states: tuple

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))

    def __len__(self) -> int:
        return len(self.states)

    def __getitem__(self, i) -> MomentState:
        return self.states[i]

    @property
    def horizon(self) -> int:
        return len(self.states) - 1


def propagate(
    dyn: GpcDynamics,
    policy: LiftedPolicy,
    init: MomentState,
    n_steps: int | None = None,
) -> MomentTrajectory:
    """Roll the mean/covariance recursion forward under a lifted policy."""
    N = len(policy) if n_steps is None else int(n_steps)
    if N < 0:
        raise ParameterError("horizon must be nonnegative")
    if N > len(policy):
        raise ParameterError(f"policy has {len(policy)} stages, needs {N}")
    if init.n != dyn.n:
        raise ParameterError(
            f"initial moment state has dimension {init.n}, lifted dynamics need {dyn.n}"
        )
    states = [init]
    mean, cov = init.mean, init.cov
    for i in range(N):
        acl = dyn.big_a + dyn.big_b @ policy.big_gains[i]
        mean = acl @ mean + dyn.big_b @ policy.big_offsets[i]
        cov = acl @ cov @ acl.T + dyn.lifted_noise_cov
        states.append(MomentState(mean=mean, cov=cov))
        mean, cov = states[-1].mean, states[-1].cov
    return MomentTrajectory(states=tuple(states))


def _split(ms: MomentState, basis: PolyBasis):
    p1 = basis.n_terms
    if ms.n % p1 != 0:
        raise ParameterError(
            f"moment state of dimension {ms.n} is not a multiple of {p1} basis terms"
        )
    n_x = ms.n // p1
    return ms.mean.reshape(n_x, p1), ms.cov.reshape(n_x, p1, n_x, p1)


def state_mean(ms: MomentState, basis: PolyBasis) -> np.ndarray:
    """E[x]: the constant coefficient of each state block."""
    mean_blocks, _ = _split(ms, basis)
    return mean_blocks[:, 0].copy()


def state_second_moment(ms: MomentState, basis: PolyBasis) -> np.ndarray:
    """E[x x^T] combining mean coefficients and coefficient covariance.

    Entry (i, j) is ``sum_k <phi_k^2> (mean_ik mean_jk + cov_(ik)(jk))``;
    orthogonality removes all cross-term contributions.
    """
    mean_blocks, cov_blocks = _split(ms, basis)
    w = basis.norms
    second = (mean_blocks * w) @ mean_blocks.T
    second += np.einsum("ikjk,k->ij", cov_blocks, w)
    return 0.5 * (second + second.T)


def state_variance(ms: MomentState, basis: PolyBasis) -> np.ndarray:
    """Var[x] = E[x x^T] - E[x] E[x]^T with nonnegative diagonal."""
    mu = state_mean(ms, basis)
    var = state_second_moment(ms, basis) - np.outer(mu, mu)
    var = 0.5 * (var + var.T)
    d = np.arange(var.shape[0])
    var[d, d] = np.maximum(var[d, d], 0.0)
    return var
