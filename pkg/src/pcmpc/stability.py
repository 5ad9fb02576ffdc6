"""Closed-loop certificates for the lifted coefficient dynamics.

A fixed feedback K on the expansion coefficients gives the lifted closed
loop ``Acl = bigA + bigB kron(K, I)``.  When Acl is Schur, the Lyapunov
equation

    Acl' P Acl - P = -(1 + delta) M,     M = kron(Q + K'RK, W)

yields a quadratic function whose expected one-step decrease is
``-(1+delta) z'Mz + b`` with noise offset ``b = tr(P bigF Sigma bigF')``.
Outside the sublevel set ``z'Mz <= b/delta`` the decrease beats ``-z'Mz``,
which bounds the closed-loop moments; the value-function checks confirm the
finite-horizon cost is dominated by ``z'Pz + N b``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import CertificateError, ConditioningError, ParameterError
from .galerkin import GpcDynamics

__all__ = [
    "StabilityCertificate",
    "terminal_gain",
    "solve_lyapunov",
    "build_certificate",
    "residual_check",
    "drift_check",
    "value_bound_check",
    "boundedness_trace",
    "ResidualReport",
    "DriftReport",
    "ValueBoundReport",
    "BoundednessReport",
]

_LYAP_RESIDUAL_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class StabilityCertificate:
    """Lyapunov data for a fixed coefficient feedback.

    ``drift_offset`` is the expected noise injection per step; the
    invariant neighborhood is ``{z : z' stage_weight z <= drift_offset /
    delta}``.
    """

    gain: np.ndarray
    big_gain: np.ndarray
    lyapunov: np.ndarray
    stage_weight: np.ndarray
    drift_offset: float
    delta: float
    spectral_radius: float
    residual: float


def terminal_gain(dyn: GpcDynamics, weights) -> np.ndarray:
    """Infinite-horizon feedback for the mean-parameter pair.

    Solves the discrete Riccati equation at the constant expansion
    coefficients (the parameter means) with the input weight regularized by
    ``weights.epsilon`` so a singular R still yields a well-posed gain.
    """
    a0 = dyn.a_coeffs[0]
    b0 = dyn.b_coeffs[0]
    r_reg = weights.r + max(weights.epsilon, 0.0) * np.eye(dyn.n_u)
    if np.linalg.eigvalsh(r_reg).min() <= 0.0:
        raise ConditioningError(
            "input weight is singular; set a positive epsilon to define the gain"
        )
    try:
        s = scipy.linalg.solve_discrete_are(a0, b0, weights.q, r_reg)
    except Exception as exc:
        raise ConditioningError(f"Riccati solve for the terminal gain failed: {exc}") from exc
    k = -np.linalg.solve(r_reg + b0.T @ s @ b0, b0.T @ s @ a0)
    return k


def solve_lyapunov(acl: np.ndarray, stage_weight: np.ndarray, delta: float) -> np.ndarray:
    """P with Acl' P Acl - P = -(1 + delta) stage_weight, residual-checked."""
    if delta <= 0.0:
        raise ParameterError("delta must be positive")
    # the algebraic equation can still be solvable past rho = 1, but the
    # solution stops being the PSD series sum the certificate needs
    rho = float(np.max(np.abs(np.linalg.eigvals(acl))))
    if rho >= 1.0:
        raise ConditioningError(
            f"spectral radius {rho:.6f} >= 1; the Lyapunov equation has no "
            "positive semidefinite solution"
        )
    rhs = (1.0 + delta) * stage_weight
    p = scipy.linalg.solve_discrete_lyapunov(acl.T, rhs)
    p = 0.5 * (p + p.T)
    residual = float(np.max(np.abs(acl.T @ p @ acl - p + rhs)))
    scale = max(1.0, float(np.max(np.abs(rhs))))
    if residual > _LYAP_RESIDUAL_TOL * scale:
        raise ConditioningError(
            f"Lyapunov solve residual {residual:.3e} exceeds tolerance"
        )
    return p


def build_certificate(
    dyn: GpcDynamics,
    weights,
    gain: np.ndarray | None = None,
    delta: float = 0.1,
) -> StabilityCertificate:
    """Certify a coefficient feedback; raises when the loop is not Schur."""
    if gain is None:
        gain = terminal_gain(dyn, weights)
    gain = np.asarray(gain, dtype=float)
    if gain.shape != (dyn.n_u, dyn.n_x):
        raise ParameterError(f"gain shape {gain.shape}, expected {(dyn.n_u, dyn.n_x)}")
    big_gain = np.kron(gain, np.eye(dyn.n_terms))
    acl = dyn.big_a + dyn.big_b @ big_gain
    rho = float(np.max(np.abs(np.linalg.eigvals(acl))))
    if rho >= 1.0:
        raise CertificateError(
            f"lifted closed loop has spectral radius {rho:.6f} >= 1; "
            "the expansion coefficients are not mean-square contracting",
            spectral_radius=rho,
        )
    w_diag = np.diag(dyn.basis.norms)
    stage_weight = np.kron(weights.q + gain.T @ weights.r @ gain, w_diag)
    stage_weight = 0.5 * (stage_weight + stage_weight.T)
    lyap = solve_lyapunov(acl, stage_weight, delta)
    drift_offset = float(np.trace(lyap @ dyn.lifted_noise_cov))
    return StabilityCertificate(
        gain=gain,
        big_gain=big_gain,
        lyapunov=lyap,
        stage_weight=stage_weight,
        drift_offset=drift_offset,
        delta=float(delta),
        spectral_radius=rho,
        residual=float(
            np.max(np.abs(acl.T @ lyap @ acl - lyap + (1.0 + delta) * stage_weight))
        ),
    )


@dataclass(frozen=True, eq=False)
class ResidualReport:
    """Recomputed Lyapunov-equation residual for an existing certificate."""

    residual: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.residual <= self.tolerance


def residual_check(cert: StabilityCertificate, dyn: GpcDynamics) -> ResidualReport:
    """Audit the certificate's Lyapunov matrix against the dynamics.

    Recomputes ``|Acl' P Acl - P + (1 + delta) M|`` from scratch, so a
    tampered or stale ``lyapunov`` matrix fails here even though the
    construction-time check passed.
    """
    acl = dyn.big_a + dyn.big_b @ cert.big_gain
    rhs = (1.0 + cert.delta) * cert.stage_weight
    residual = float(np.max(np.abs(acl.T @ cert.lyapunov @ acl - cert.lyapunov + rhs)))
    scale = max(1.0, float(np.max(np.abs(rhs))))
    return ResidualReport(residual=residual, tolerance=_LYAP_RESIDUAL_TOL * scale)


@dataclass(frozen=True, eq=False)
class DriftReport:
    """Outcome of the sampled drift verification."""

    max_drift: float
    n_exterior: int
    identity_gap: float
    mc_gap_sigmas: float
    worst_sample: np.ndarray | None = None

    @property
    def passed(self) -> bool:
        return self.max_drift <= 1e-8 and self.identity_gap <= 1e-10


def drift_check(
    cert: StabilityCertificate,
    dyn: GpcDynamics,
    n_samples: int = 10_000,
    rng: np.random.Generator | None = None,
) -> DriftReport:
    """Verify the expected Lyapunov decrease outside the noise set.

    Samples coefficient vectors strictly outside ``{z'Mz <= b/delta}`` and
    evaluates the analytic drift ``-delta z'Mz + b`` (must be nonpositive to
    tolerance), cross-checks the expectation identity
    ``E V(Acl z + bigF w) = z'Acl'PAcl z + b`` against a direct quadratic
    expansion at a few points, and compares one Monte Carlo expectation
    against the analytic value.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    n = dyn.n
    acl = dyn.big_a + dyn.big_b @ cert.big_gain
    p_mat, m_mat = cert.lyapunov, cert.stage_weight
    b = cert.drift_offset
    level = b / cert.delta

    directions = rng.standard_normal((n_samples, n))
    quad = np.einsum("si,ij,sj->s", directions, m_mat, directions)
    keep = quad > 1e-12
    directions, quad = directions[keep], quad[keep]
    # scale each direction past the sublevel boundary by a random factor
    boundary = np.sqrt(level / quad) if level > 0 else np.ones(quad.size)
    factors = 1.0 + rng.uniform(1e-6, 3.0, size=quad.size)
    points = directions * (boundary * factors)[:, None]
    drift = -cert.delta * np.einsum("si,ij,sj->s", points, m_mat, points) + b
    max_drift = float(drift.max()) if drift.size else -np.inf
    worst = points[int(np.argmax(drift))].copy() if drift.size else None

    # expectation identity at a handful of points, two independent routes
    identity_gap = 0.0
    probe = points[: min(10, len(points))]
    for z in probe:
        lhs = float(z @ acl.T @ p_mat @ acl @ z) + b
        zp = acl @ z
        rhs = float(zp @ p_mat @ zp) + float(np.trace(p_mat @ dyn.lifted_noise_cov))
        identity_gap = max(identity_gap, abs(lhs - rhs) / max(1.0, abs(lhs)))

    # Monte Carlo cross-check of the expectation at each probe point
    mc_gap_sigmas = 0.0
    if len(probe):
        draws = rng.multivariate_normal(
            np.zeros(dyn.noise_cov.shape[0]), dyn.noise_cov, size=100_000
        )
        noise_terms = draws @ dyn.big_f.T
        for z in probe:
            nxt = acl @ z + noise_terms
            vals = np.einsum("si,ij,sj->s", nxt, p_mat, nxt)
            analytic = float(z @ acl.T @ p_mat @ acl @ z) + b
            se = float(vals.std(ddof=1) / np.sqrt(vals.size))
            mc_gap_sigmas = max(mc_gap_sigmas, abs(float(vals.mean()) - analytic) / max(se, 1e-300))

    return DriftReport(
        max_drift=max_drift,
        n_exterior=int(len(points)),
        identity_gap=float(identity_gap),
        mc_gap_sigmas=float(mc_gap_sigmas),
        worst_sample=worst,
    )


@dataclass(frozen=True, eq=False)
class ValueBoundReport:
    """Sampled domination checks for the finite-horizon value function."""

    max_suboptimal_gap: float
    max_optimal_gap: float
    n_samples: int
    worst_sample: np.ndarray | None = None

    @property
    def passed(self) -> bool:
        return self.max_suboptimal_gap <= 1e-8 and self.max_optimal_gap <= 1e-8


def value_bound_check(
    prob,
    cert: StabilityCertificate | None = None,
    n_samples: int = 1000,
    radius: float = 10.0,
    rng: np.random.Generator | None = None,
) -> ValueBoundReport:
    """Check V*(z) <= V_K(z) <= z'Pz + N b on sampled coefficient vectors.

    ``V_K`` is the zero-offset certified-gain policy and ``V*`` the
    unconstrained optimum over offsets; both evaluate in closed form from
    the precomputed quadratic pieces.  Constraints are deliberately ignored:
    the bound concerns the unconstrained value function.
    """
    from . import controller

    rng = rng if rng is not None else np.random.default_rng(1)
    if cert is None:
        cert = prob.certificate
    if cert is None:
        raise ParameterError("a stability certificate is required")
    unconstrained = controller.SmpcProblem(
        dyn=prob.dyn,
        horizon=prob.horizon,
        weights=prob.weights,
        constraints=(),
        mode="fixed-gain",
        gain=cert.gain,
        terminal_matrix=cert.lyapunov,
        certificate=cert,
    )
    plan = controller._plan_for(unconstrained, (cert.gain,) * prob.horizon)
    n = prob.dyn.n
    points = radius * rng.standard_normal((n_samples, n))

    quad_x0 = np.einsum("si,ij,sj->s", points, plan.X0, points)
    v_sub = quad_x0 + plan.gamma0
    f_rows = points @ plan.Fmat.T
    h_inv_f = np.linalg.solve(plan.H_reg, f_rows.T).T
    v_opt = v_sub - 0.5 * np.einsum("sk,sk->s", f_rows, h_inv_f)

    lyap_quad = np.einsum("si,ij,sj->s", points, cert.lyapunov, points)
    bound = lyap_quad + prob.horizon * cert.drift_offset
    sub_gaps = v_sub - bound
    opt_gaps = v_opt - v_sub
    worst_idx = int(np.argmax(sub_gaps)) if sub_gaps.max() >= opt_gaps.max() else int(
        np.argmax(opt_gaps)
    )
    return ValueBoundReport(
        max_suboptimal_gap=float(sub_gaps.max()),
        max_optimal_gap=float(opt_gaps.max()),
        n_samples=n_samples,
        worst_sample=points[worst_idx].copy(),
    )


@dataclass(frozen=True, eq=False)
class BoundednessReport:
    """Lyapunov trace along a closed-loop run plus a one-step comparison."""

    values: np.ndarray
    diverged: bool
    last_mean: float
    middle_mean: float
    shift_lhs: float | None = None
    shift_rhs: float | None = None
    shift_gap: float | None = None


def boundedness_trace(
    run,
    prob=None,
    cert: StabilityCertificate | None = None,
    n_noise: int = 2000,
    rng: np.random.Generator | None = None,
) -> BoundednessReport:
    """Value-function trace along a recorded run with a divergence flag.

    ``run`` needs ``states`` (T+1, n_x).  With a problem supplied the trace
    holds the receding-horizon optimal value at every visited state; with
    only a certificate it holds the quadratic z'Pz as a cheap surrogate.
    Divergence means the tail average (last fifth) exceeds twice the
    mid-run average.  With both a problem and a certificate, also compares
    the expected shifted-policy value after one true mean-parameter step
    against the lifted prediction at the run's initial state, sharing noise
    draws between the two routes.
    """
    if cert is None and prob is not None:
        cert = prob.certificate
    if cert is None and prob is None:
        raise ParameterError("a problem or a stability certificate is required")
    states = np.asarray(run.states, dtype=float)
    if prob is not None:
        from . import controller

        values = np.array(
            [controller.solve_smpc(prob, x).value for x in states]
        )
    else:
        p1 = cert.lyapunov.shape[0] // states.shape[1]
        lifted = np.zeros((states.shape[0], cert.lyapunov.shape[0]))
        lifted[:, ::p1] = states
        values = np.einsum("ti,ij,tj->t", lifted, cert.lyapunov, lifted)

    t = len(values)
    tail = values[int(np.ceil(0.8 * t)) :]
    middle = values[int(np.floor(0.4 * t)) : int(np.ceil(0.6 * t))]
    last_mean = float(tail.mean()) if tail.size else float(values[-1])
    middle_mean = float(middle.mean()) if middle.size else float(values.mean())
    diverged = bool(last_mean > 2.0 * middle_mean + 1e-12)

    shift_lhs = shift_rhs = shift_gap = None
    if prob is not None and cert is not None:
        from . import controller

        rng = rng if rng is not None else np.random.default_rng(2)
        dyn = prob.dyn
        x0 = states[0]
        sol = controller.solve_smpc(prob, x0)
        shifted_gains = tuple(sol.policy.gains[1:]) + (cert.gain,)
        g_shift = np.concatenate(
            [np.asarray(g, dtype=float) for g in sol.policy.offsets[1:]]
            + [np.zeros(dyn.n_u)]
        )
        plan = controller._plan_for(prob, shifted_gains)

        def batch_value(rows):
            quad = np.einsum("si,ij,sj->s", rows, plan.X0, rows)
            lin = rows @ plan.Fmat.T @ g_shift
            return quad + lin + 0.5 * float(g_shift @ plan.H @ g_shift) + plan.gamma0

        draws = rng.multivariate_normal(
            np.zeros(dyn.noise_cov.shape[0]), dyn.noise_cov, size=n_noise
        )
        a0, b0 = dyn.a_coeffs[0], dyn.b_coeffs[0]
        u0 = sol.policy.offsets[0] + sol.policy.gains[0] @ x0
        x_next = (a0 @ x0 + b0 @ u0)[None, :] + draws @ dyn.noise_gain.T
        lifted_next = np.zeros((n_noise, dyn.n))
        lifted_next[:, :: dyn.n_terms] = x_next
        shift_lhs = float(batch_value(lifted_next).mean())

        phi0 = np.zeros(dyn.n)
        phi0[:: dyn.n_terms] = x0
        big_l0 = np.kron(sol.policy.gains[0], np.eye(dyn.n_terms))
        e1 = np.zeros((dyn.n_terms, 1))
        e1[0, 0] = 1.0
        big_g0 = np.kron(sol.policy.offsets[0][:, None], e1).ravel()
        phi_next = (dyn.big_a @ phi0 + dyn.big_b @ (big_l0 @ phi0 + big_g0))[
            None, :
        ] + draws @ dyn.big_f.T
        shift_rhs = float(batch_value(phi_next).mean())
        shift_gap = shift_rhs - shift_lhs

    return BoundednessReport(
        values=values,
        diverged=diverged,
        last_mean=last_mean,
        middle_mean=middle_mean,
        shift_lhs=shift_lhs,
        shift_rhs=shift_rhs,
        shift_gap=shift_gap,
    )
