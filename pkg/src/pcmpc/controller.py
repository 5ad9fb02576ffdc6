"""Chance-constrained finite-horizon control on the lifted coefficient system.

The decision variables are a per-stage affine policy ``u_i = g_i + L_i x``
applied to expansion coefficients.  The expected quadratic cost is exact in
the propagated moments, and each state chance constraint with confidence
``beta`` is tightened distribution-free to

    c' E[x_i] + sqrt(beta / (1 - beta)) sqrt(c' Var[x_i] c) <= d .

With gains frozen the tightened constraints are convex (second-order cone)
in the stacked offsets; they are enforced through accumulated linear
outer approximations, each solved by the internal active-set QP, which
converges to the restricted optimum because the cuts never remove feasible
points.  The joint solver alternates exact offset QPs with damped gradient
steps on the gains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .basis import PolyBasis
from .errors import (
    ConditioningError,
    ParameterError,
    QpInfeasibleError,
    SmpcInfeasibleError,
)
from .galerkin import GpcDynamics, LiftedPolicy, lift_policy, lift_state
from .moments import (
    MomentState,
    MomentTrajectory,
    state_mean,
    state_variance,
)
from .qp import QpSolution, solve_qp

__all__ = [
    "ChanceConstraint",
    "CostWeights",
    "Policy",
    "SmpcProblem",
    "SmpcSolution",
    "kappa",
    "chance_constraint_value",
    "cost",
    "build_problem",
    "solve_fixed_gain",
    "solve_joint",
    "solve_smpc",
    "mpc_step",
]

_CUT_TOL = 1e-10
_MAX_CUT_ROUNDS = 60
_SLACK_PENALTY = 1e4


def kappa(beta: float) -> float:
    """Distribution-free tightening multiplier for confidence ``beta``."""
    beta = float(beta)
    if not 0.0 < beta < 1.0:
        raise ParameterError(f"beta must lie in (0, 1), got {beta}")
    return math.sqrt(beta / (1.0 - beta))


@dataclass(frozen=True)
class ChanceConstraint:
    """Require Pr[c' x <= d] >= beta at every constrained stage."""

    c: np.ndarray
    d: float
    beta: float

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).ravel()
        if not np.all(np.isfinite(c)) or not np.any(c):
            raise ParameterError("constraint direction must be finite and nonzero")
        if not 0.0 < float(self.beta) < 1.0:
            raise ParameterError(f"beta must lie in (0, 1), got {self.beta}")
        c.setflags(write=False)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "d", float(self.d))
        object.__setattr__(self, "beta", float(self.beta))


def chance_constraint_value(cc: ChanceConstraint, ms: MomentState, basis: PolyBasis) -> float:
    """Tightened constraint value; nonpositive means satisfied."""
    mu = state_mean(ms, basis)
    var = state_variance(ms, basis)
    spread = float(cc.c @ var @ cc.c)
    return float(cc.c @ mu + kappa(cc.beta) * math.sqrt(max(spread, 0.0)) - cc.d)


@dataclass(frozen=True, eq=False)
class CostWeights:
    """Quadratic stage weights plus the terminal-weight mode.

    ``terminal`` is ``None`` (no terminal cost), the string ``"lyapunov"``
    (use the certificate's Lyapunov matrix, resolved when the problem is
    built), or an explicit lifted matrix.  ``epsilon`` is the Tikhonov term
    added to the offset QP Hessian when R leaves it singular.
    """

    q: np.ndarray
    r: np.ndarray
    terminal: object = "lyapunov"
    epsilon: float = 1e-8

    def __post_init__(self):
        q = _check_psd("q", self.q)
        r = _check_psd("r", self.r)
        if self.epsilon < 0.0:
            raise ParameterError("epsilon must be nonnegative")
        term = self.terminal
        if term is not None and not (isinstance(term, str) and term == "lyapunov"):
            term = _check_psd("terminal", term)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "terminal", term)
        object.__setattr__(self, "epsilon", float(self.epsilon))


def _check_psd(name, mat):
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ParameterError(f"{name} must be a square matrix")
    if not np.allclose(mat, mat.T, atol=1e-10):
        raise ParameterError(f"{name} must be symmetric")
    mat = 0.5 * (mat + mat.T)
    if mat.size and np.linalg.eigvalsh(mat).min() < -1e-10:
        raise ParameterError(f"{name} must be positive semidefinite")
    mat.setflags(write=False)
    return mat


@dataclass(frozen=True, eq=False)
class Policy:
    """Per-stage affine control law u_i = offsets[i] + gains[i] x."""

    gains: tuple
    offsets: tuple

    def __post_init__(self):
        gains = tuple(np.asarray(L, dtype=float) for L in self.gains)
        offsets = tuple(np.asarray(g, dtype=float).ravel() for g in self.offsets)
        if len(gains) != len(offsets):
            raise ParameterError("gains and offsets must have the same length")
        for L, g in zip(gains, offsets):
            if L.shape[0] != g.size:
                raise ParameterError("gain rows must match offset size")
        object.__setattr__(self, "gains", gains)
        object.__setattr__(self, "offsets", offsets)

    def __len__(self) -> int:
        return len(self.gains)


def cost(
    traj: MomentTrajectory,
    lifted: LiftedPolicy,
    weights: CostWeights,
    basis: PolyBasis,
    terminal_weight: np.ndarray | None = None,
) -> float:
    """Expected cost of a moment trajectory under a lifted policy.

    Stage terms combine the mean quadratic form, the covariance trace, the
    offset penalty, and the offset/feedback cross term; the terminal term
    weighs the final moments.  ``terminal_weight`` must be supplied when the
    weights request the Lyapunov mode and no explicit matrix is stored.
    """
    N = traj.horizon
    if len(lifted) < N:
        raise ParameterError(f"policy has {len(lifted)} stages, trajectory needs {N}")
    p1 = basis.n_terms
    n = traj[0].n
    W = np.diag(basis.norms)
    big_q = np.kron(weights.q, W)
    big_r = np.kron(weights.r, W)
    if big_q.shape != (n, n):
        raise ParameterError("weights do not match the lifted dimension")
    S = _resolve_terminal(weights, terminal_weight, n)
    total = 0.0
    for i in range(N):
        mu, cov = traj[i].mean, traj[i].cov
        L, g = lifted.big_gains[i], lifted.big_offsets[i]
        M = big_q + L.T @ big_r @ L
        total += mu @ M @ mu + np.trace(M @ cov)
        total += g @ big_r @ g + 2.0 * (g @ big_r @ (L @ mu))
    mu, cov = traj[N].mean, traj[N].cov
    total += mu @ S @ mu + np.trace(S @ cov)
    return float(total)


def _resolve_terminal(weights: CostWeights, override, n: int) -> np.ndarray:
    if override is not None:
        S = np.asarray(override, dtype=float)
    elif weights.terminal is None:
        return np.zeros((n, n))
    elif isinstance(weights.terminal, str):
        raise ParameterError(
            "terminal mode 'lyapunov' needs a resolved matrix; build the problem "
            "first or pass terminal_weight explicitly"
        )
    else:
        S = weights.terminal
    if S.shape != (n, n):
        raise ParameterError(f"terminal weight shape {S.shape}, expected {(n, n)}")
    return S


# ----------------------------------------------------------------------
# problem container


@dataclass(frozen=True, eq=False)
class SmpcProblem:
    """Finite-horizon chance-constrained problem on the lifted dynamics.

    Chance constraints apply at predicted stages ``1 .. horizon - 1``.
    ``gain`` is the frozen feedback used by the fixed-gain solver and as the
    joint solver's starting point.
    """

    dyn: GpcDynamics
    horizon: int
    weights: CostWeights
    constraints: tuple
    mode: str
    gain: np.ndarray
    terminal_matrix: np.ndarray
    certificate: object = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ParameterError("horizon must be at least 1")
        if self.mode not in ("fixed-gain", "joint"):
            raise ParameterError(f"unknown solver mode {self.mode!r}")
        gain = np.asarray(self.gain, dtype=float)
        if gain.shape != (self.dyn.n_u, self.dyn.n_x):
            raise ParameterError(
                f"gain shape {gain.shape}, expected {(self.dyn.n_u, self.dyn.n_x)}"
            )
        for cc in self.constraints:
            if cc.c.size != self.dyn.n_x:
                raise ParameterError("constraint direction must match the state dimension")
        term = np.asarray(self.terminal_matrix, dtype=float)
        if term.shape != (self.dyn.n, self.dyn.n):
            raise ParameterError("terminal matrix must act on the lifted state")
        gain.setflags(write=False)
        term.setflags(write=False)
        object.__setattr__(self, "gain", gain)
        object.__setattr__(self, "terminal_matrix", term)
        object.__setattr__(self, "constraints", tuple(self.constraints))
        object.__setattr__(self, "_plans", {})

    @property
    def basis(self) -> PolyBasis:
        return self.dyn.basis


def build_problem(
    dyn: GpcDynamics,
    horizon: int,
    weights: CostWeights,
    constraints: Sequence[ChanceConstraint] = (),
    mode: str = "fixed-gain",
    gain: np.ndarray | None = None,
    delta: float = 0.1,
) -> SmpcProblem:
    """Resolve the default gain and terminal weight and assemble the problem.

    The Lyapunov terminal mode builds a stability certificate as a side
    effect and stores it on the problem.
    """
    from . import stability

    certificate = None
    if isinstance(weights.terminal, str):  # "lyapunov"
        certificate = stability.build_certificate(dyn, weights, gain=gain, delta=delta)
        gain = certificate.gain
        terminal = certificate.lyapunov
    else:
        if gain is None:
            gain = stability.terminal_gain(dyn, weights)
        terminal = (
            np.zeros((dyn.n, dyn.n)) if weights.terminal is None else weights.terminal
        )
    return SmpcProblem(
        dyn=dyn,
        horizon=horizon,
        weights=weights,
        constraints=tuple(constraints),
        mode=mode,
        gain=np.asarray(gain, dtype=float),
        terminal_matrix=terminal,
        certificate=certificate,
    )


# ----------------------------------------------------------------------
# affine maps of the mean trajectory in the stacked offsets


class _Plan:
    """Precomputed affine/quadratic data for one tuple of stage gains.

    Everything that does not depend on the initial moments lives here: the
    transition products mapping the initial mean and the stacked offsets to
    each stage mean, the offset-space cost Hessian, the zero-initial
    covariance path, and per-constraint contraction matrices.
    """

    def __init__(self, prob: SmpcProblem, gains: tuple):
        dyn = prob.dyn
        N = prob.horizon
        n, nu, p1 = dyn.n, dyn.n_u, dyn.n_terms
        norms = dyn.basis.norms
        W = np.diag(norms)
        big_q = np.kron(prob.weights.q, W)
        big_r = np.kron(prob.weights.r, W)
        S = prob.terminal_matrix
        eye_p = np.eye(p1)
        e1 = np.zeros((p1, 1))
        e1[0, 0] = 1.0
        Eu = np.kron(np.eye(nu), e1)  # offsets act on constant coefficients
        BEu = dyn.big_b @ Eu

        self.gains = gains
        big_gains = [np.kron(L, eye_p) for L in gains]
        acl = [dyn.big_a + dyn.big_b @ bl for bl in big_gains]

        P = [np.eye(n)]
        G = [np.zeros((n, N * nu))]
        gam0 = [np.zeros((n, n))]
        for i in range(N):
            P.append(acl[i] @ P[i])
            Gi = acl[i] @ G[i]
            Gi[:, i * nu : (i + 1) * nu] += BEu
            G.append(Gi)
            gam0.append(acl[i] @ gam0[i] @ acl[i].T + dyn.lifted_noise_cov)

        M = [big_q + bl.T @ big_r @ bl for bl in big_gains]
        C = [Eu.T @ big_r @ bl for bl in big_gains]
        Ru = Eu.T @ big_r @ Eu

        H = np.zeros((N * nu, N * nu))
        Fmat = np.zeros((N * nu, n))
        X0 = np.zeros((n, n))
        gamma0 = 0.0
        for i in range(N):
            sel = slice(i * nu, (i + 1) * nu)
            H += G[i].T @ M[i] @ G[i]
            H[sel, sel] += Ru
            cross = C[i] @ G[i]  # (nu, N nu)
            H[sel, :] += cross
            H[:, sel] += cross.T
            Fmat += G[i].T @ (M[i] @ P[i])
            Fmat[sel, :] += C[i] @ P[i]
            X0 += P[i].T @ M[i] @ P[i]
            gamma0 += np.trace(M[i] @ gam0[i])
        H += G[N].T @ S @ G[N]
        Fmat += G[N].T @ (S @ P[N])
        X0 += P[N].T @ S @ P[N]
        gamma0 += np.trace(S @ gam0[N])
        H = (H + H.T)  # doubles the quadratic form: V = 0.5 g'Hg + ...
        Fmat = 2.0 * Fmat

        self.n, self.nu, self.N, self.p1 = n, nu, N, p1
        self.big_gains = big_gains
        self.acl = acl
        self.P, self.G, self.gam0 = P, G, gam0
        self.H = H
        self.Fmat = Fmat
        self.X0 = 0.5 * (X0 + X0.T)
        self.gamma0 = float(gamma0)
        self.H_reg = self._regularize(H, prob.weights.epsilon)

        # per-(stage, constraint) contraction data for the tightened rows
        sqrtw = np.sqrt(norms)
        self.rows = []
        for i in range(1, N):
            for l, cc in enumerate(prob.constraints):
                c_omega = np.zeros(n)
                c_omega[::p1] = cc.c
                Cs = np.zeros((p1 - 1, n)) if p1 > 1 else np.zeros((0, n))
                for k in range(1, p1):
                    Cs[k - 1, k::p1] = sqrtw[k] * cc.c
                Cf = np.zeros((p1, n))
                for k in range(p1):
                    Cf[k, k::p1] = sqrtw[k] * cc.c
                self.rows.append(
                    {
                        "stage": i,
                        "constraint": l,
                        "kappa": kappa(cc.beta),
                        "d": cc.d,
                        "a_mean": G[i].T @ c_omega,
                        "Pc": P[i].T @ c_omega,
                        "Js": Cs @ G[i],
                        "CsP": Cs @ P[i],
                        "CfP": Cf @ P[i],
                        "var_const": float(np.sum((Cf @ gam0[i]) * Cf)),
                    }
                )

    @staticmethod
    def _regularize(H, epsilon):
        Hs = 0.5 * (H + H.T)
        try:
            np.linalg.cholesky(Hs)
            return Hs
        except np.linalg.LinAlgError:
            if epsilon <= 0.0:
                raise ConditioningError(
                    "offset QP Hessian is singular; set a positive epsilon "
                    "(required when R is singular with no terminal weight)"
                ) from None
        return Hs + 2.0 * epsilon * np.eye(Hs.shape[0])


def _plan_for(prob: SmpcProblem, gains: tuple) -> _Plan:
    key = tuple(np.asarray(L, dtype=float).tobytes() for L in gains)
    cache = prob._plans
    if key not in cache:
        if len(cache) >= 64:  # joint-mode receding horizon creates fresh gains
            cache.clear()
        cache[key] = _Plan(prob, tuple(np.asarray(L, dtype=float) for L in gains))
    return cache[key]


def _initial_moments(prob: SmpcProblem, init) -> MomentState:
    if isinstance(init, MomentState):
        if init.n != prob.dyn.n:
            raise ParameterError("initial moment state does not match the lifted dimension")
        return init
    x = np.asarray(init, dtype=float).ravel()
    if x.size == prob.dyn.n_x:
        mean = lift_state(x, prob.basis)
    elif x.size == prob.dyn.n:
        mean = x
    else:
        raise ParameterError(
            f"initial state of size {x.size}; expected {prob.dyn.n_x} (state) "
            f"or {prob.dyn.n} (lifted)"
        )
    return MomentState(mean=mean, cov=np.zeros((prob.dyn.n, prob.dyn.n)))


@dataclass(frozen=True, eq=False)
class SmpcSolution:
    """Solver output: the policy, its cost, and constraint diagnostics."""

    policy: Policy
    offsets_stacked: np.ndarray
    value: float
    max_constraint_violation: float
    fallback: bool
    n_cut_rounds: int
    converged: bool
    qp: QpSolution | None = None

    @property
    def u0(self) -> np.ndarray:
        return self.policy.offsets[0]


class _RowEvaluator:
    """Tightened constraint values and gradients at a fixed initial moment."""

    def __init__(self, plan: _Plan, ms: MomentState):
        self.entries = []
        cov0 = ms.cov if np.any(ms.cov) else None
        for row in plan.rows:
            b_mean = float(row["Pc"] @ ms.mean)
            rs = row["CsP"] @ ms.mean
            var_c = row["var_const"]
            if cov0 is not None:
                CfP = row["CfP"]
                var_c += float(np.sum((CfP @ cov0) * CfP))
            self.entries.append((row, b_mean, rs, var_c))

    def value(self, g, entry) -> float:
        row, b_mean, rs, var_c = entry
        spread = row["Js"] @ g + rs
        s = math.sqrt(float(spread @ spread) + var_c)
        return float(row["a_mean"] @ g + b_mean + row["kappa"] * s - row["d"])

    def values(self, g) -> np.ndarray:
        return np.array([self.value(g, e) for e in self.entries])

    def cut(self, g, entry):
        """Linear row grad' g <= rhs supporting the constraint at g."""
        row, b_mean, rs, var_c = entry
        spread = row["Js"] @ g + rs
        s = math.sqrt(float(spread @ spread) + var_c)
        if s > 1e-300:
            grad = row["a_mean"] + (row["kappa"] / s) * (row["Js"].T @ spread)
        else:
            grad = row["a_mean"].copy()
        h = self.value(g, entry)
        return grad, float(grad @ g - h)


def _solve_offsets(
    prob: SmpcProblem,
    plan: _Plan,
    ms: MomentState,
    soften: bool,
):
    """Cutting-plane loop over the internal QP; returns (g, diagnostics)."""
    f = plan.Fmat @ ms.mean
    rows = _RowEvaluator(plan, ms)
    n_g = plan.N * plan.nu
    g = np.linalg.solve(plan.H_reg, -f)
    if not rows.entries:
        return g, None, 0.0, 0, False
    viol = rows.values(g)
    if viol.max() <= _CUT_TOL:
        return g, None, float(viol.max()), 0, False

    n_s = len(rows.entries) if soften else 0
    if soften:
        H_ext = np.zeros((n_g + n_s, n_g + n_s))
        H_ext[:n_g, :n_g] = plan.H_reg
        H_ext[n_g:, n_g:] = 2e-8 * np.eye(n_s)
        f_ext = np.concatenate([f, _SLACK_PENALTY * np.ones(n_s)])
        neg_slack = np.hstack([np.zeros((n_s, n_g)), -np.eye(n_s)])
    cuts_a, cuts_b = [], []
    seen_cuts = set()
    last_qp = None
    best_g, best_viol = g, float(viol.max())
    for round_idx in range(1, _MAX_CUT_ROUNDS + 1):
        for j, entry in enumerate(rows.entries):
            grad, rhs = rows.cut(g, entry)
            # rows without curvature regenerate the same cut every round;
            # duplicates would only clutter the QP with degenerate planes
            key = (j, grad.tobytes(), rhs)
            if key in seen_cuts:
                continue
            seen_cuts.add(key)
            if soften:
                row_ext = np.zeros(n_g + n_s)
                row_ext[:n_g] = grad
                row_ext[n_g + j] = -1.0
                cuts_a.append(row_ext)
            else:
                cuts_a.append(grad)
            cuts_b.append(rhs)
        try:
            if soften:
                A_qp = np.vstack([np.array(cuts_a), neg_slack])
                b_qp = np.concatenate([np.array(cuts_b), np.zeros(n_s)])
                last_qp = solve_qp(H_ext, f_ext, A_qp, b_qp)
                g_new = last_qp.z[:n_g]
            else:
                last_qp = solve_qp(plan.H_reg, f, np.array(cuts_a), np.array(cuts_b))
                g_new = last_qp.z
        except QpInfeasibleError as exc:
            worst = int(np.argmax(rows.values(g)))
            row = plan.rows[worst]
            raise SmpcInfeasibleError(
                f"tightened constraints admit no offsets ({exc})",
                stage=row["stage"],
                constraint=row["constraint"],
                value=float(rows.values(g).max()),
            ) from exc
        viol = rows.values(g_new)
        moved = np.max(np.abs(g_new - g))
        g = g_new
        if soften:
            slack = last_qp.z[n_g:]
            effective = float((viol - slack).max())
        else:
            effective = float(viol.max())
        if effective < best_viol:
            best_g, best_viol = g, effective
        if effective <= _CUT_TOL or moved <= 1e-12 * max(1.0, np.max(np.abs(g))):
            return g, last_qp, float(viol.max()), round_idx, soften
    if soften:
        return best_g, last_qp, float(rows.values(best_g).max()), _MAX_CUT_ROUNDS, True
    worst = int(np.argmax(rows.values(best_g)))
    row = plan.rows[worst]
    raise SmpcInfeasibleError(
        f"tightened constraint {row['constraint']} at stage {row['stage']} "
        f"cannot be met (violation {best_viol:.3e})",
        stage=row["stage"],
        constraint=row["constraint"],
        value=best_viol,
    )


def _offset_value(plan: _Plan, ms: MomentState, g: np.ndarray) -> float:
    f = plan.Fmat @ ms.mean
    const = float(ms.mean @ plan.X0 @ ms.mean) + plan.gamma0
    if np.any(ms.cov):
        const += float(np.sum(plan.X0 * ms.cov))
    return float(0.5 * g @ plan.H @ g + f @ g + const)


def _make_solution(
    prob: SmpcProblem,
    plan: _Plan,
    ms: MomentState,
    g: np.ndarray,
    qp: QpSolution | None,
    max_viol: float,
    rounds: int,
    fallback: bool,
    converged: bool = True,
) -> SmpcSolution:
    offsets = tuple(g[i * plan.nu : (i + 1) * plan.nu].copy() for i in range(plan.N))
    policy = Policy(gains=tuple(plan.gains), offsets=offsets)
    return SmpcSolution(
        policy=policy,
        offsets_stacked=g.copy(),
        value=_offset_value(plan, ms, g),
        max_constraint_violation=max_viol,
        fallback=fallback,
        n_cut_rounds=rounds,
        converged=converged,
        qp=qp,
    )


def solve_fixed_gain(
    prob: SmpcProblem,
    init,
    gains: tuple | None = None,
    soften: bool = False,
) -> SmpcSolution:
    """Globally optimal stacked offsets with the stage gains frozen.

    ``init`` is a state vector, a lifted coefficient vector, or a full
    :class:`MomentState`.  Raises :class:`SmpcInfeasibleError` when the
    tightened constraints cannot be met and ``soften`` is off.
    """
    ms = _initial_moments(prob, init)
    if gains is None:
        gains = (prob.gain,) * prob.horizon
    plan = _plan_for(prob, tuple(gains))
    g, qp, max_viol, rounds, used_soft = _solve_offsets(prob, plan, ms, soften)
    return _make_solution(prob, plan, ms, g, qp, max_viol, rounds, fallback=used_soft)


def _evaluate_policy(prob: SmpcProblem, gains: tuple, g: np.ndarray, ms: MomentState):
    """Cost and tightened constraint values for arbitrary gains/offsets.

    Builds the plan without caching: gradient probes generate thousands of
    one-off gain tuples.
    """
    plan = _Plan(prob, tuple(np.asarray(L, dtype=float) for L in gains))
    rows = _RowEvaluator(plan, ms)
    return _offset_value(plan, ms, g), rows.values(g) if rows.entries else np.zeros(0)


def solve_joint(
    prob: SmpcProblem,
    init,
    max_iterations: int = 40,
    tol: float = 1e-9,
    penalty: float = 1e6,
) -> SmpcSolution:
    """Descend the inner-QP value function over the stage gains.

    The offsets are eliminated exactly: for any gain tuple the cutting-plane
    QP returns the restricted optimum, and its value defines a function of
    the gains alone.  That function is descended with central finite
    differences and Armijo backtracking, starting from the frozen-gain
    optimum, so the returned cost never exceeds the fixed-gain solution.
    Gain tuples whose tightened constraints are infeasible are scored by the
    softened solve plus a quadratic penalty on the residual violation.
    Non-convergence within the iteration budget only clears the
    ``converged`` flag; the best feasible iterate is still returned.
    """
    ms = _initial_moments(prob, init)
    shape = (prob.horizon, prob.dyn.n_u, prob.dyn.n_x)

    def score(flat):
        gains = tuple(flat.reshape(shape))
        try:
            sol = solve_fixed_gain(prob, ms, gains=gains)
            return sol.value, sol
        except SmpcInfeasibleError:
            sol = solve_fixed_gain(prob, ms, gains=gains, soften=True)
            excess = max(sol.max_constraint_violation, 0.0)
            return sol.value + penalty * excess**2, sol

    flat = np.concatenate([prob.gain.ravel()] * prob.horizon)
    current, best = score(flat)
    incumbent = best
    converged = False
    for _ in range(max_iterations):
        grad = np.zeros_like(flat)
        h = 1e-6 * max(1.0, float(np.max(np.abs(flat))))
        for j in range(flat.size):
            up = flat.copy()
            up[j] += h
            dn = flat.copy()
            dn[j] -= h
            grad[j] = (score(up)[0] - score(dn)[0]) / (2.0 * h)
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= 1e-10:
            converged = True
            break
        step = 1.0 / max(1.0, gnorm)
        accepted = False
        for _ in range(30):
            trial = flat - step * grad
            trial_value, trial_sol = score(trial)
            if trial_value <= current - 1e-4 * step * gnorm**2:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True  # stationary at this resolution
            break
        flat = trial
        previous, current = current, trial_value
        if not trial_sol.fallback and trial_sol.value < best.value:
            best = trial_sol
        if abs(previous - current) <= tol * max(1.0, abs(current)):
            converged = True
            break
    if best.fallback or best.value > incumbent.value:
        best = incumbent
    return SmpcSolution(
        policy=best.policy,
        offsets_stacked=best.offsets_stacked,
        value=best.value,
        max_constraint_violation=best.max_constraint_violation,
        fallback=best.fallback,
        n_cut_rounds=best.n_cut_rounds,
        converged=converged,
        qp=best.qp,
    )


def solve_smpc(prob: SmpcProblem, init, allow_softening: bool = True) -> SmpcSolution:
    """Dispatch on the problem's solver mode, with the slack fallback.

    When the tightened constraints are infeasible and ``allow_softening``
    is on, the constraints are relaxed with L1-penalized slacks
    (weight 1e4) and the solution is flagged ``fallback=True``.
    """
    solver = solve_joint if prob.mode == "joint" else solve_fixed_gain
    try:
        return solver(prob, init)
    except SmpcInfeasibleError:
        if not allow_softening:
            raise
        return solve_fixed_gain(prob, init, soften=True)


def mpc_step(prob: SmpcProblem, x) -> np.ndarray:
    """First applied input of the receding-horizon policy at state x."""
    x = np.asarray(x, dtype=float).ravel()
    sol = solve_smpc(prob, x)
    return sol.policy.offsets[0] + sol.policy.gains[0] @ x


def moment_trajectory(prob: SmpcProblem, init, solution: SmpcSolution) -> MomentTrajectory:
    """Propagate the moments induced by a solved policy (for reporting)."""
    from .moments import propagate

    ms = _initial_moments(prob, init)
    lifted = lift_policy(solution.policy, prob.basis)
    return propagate(prob.dyn, lifted, ms, prob.horizon)
