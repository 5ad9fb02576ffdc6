"""Closed-loop simulation on the true plant and Monte Carlo studies.

The simulated plant uses an exact parameter draw; controllers only see the
measured state.  Monte Carlo runs are seeded per run index so every
controller faces the same parameter draw, initial state, and noise
sequence, which makes paired comparisons meaningful.  Controllers never
consume the run generator, so the match is exact by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import controller as ctrl
from .errors import ParameterError, QpInfeasibleError
from .galerkin import GpcDynamics, UncertainLinearSystem
from .qp import solve_qp

__all__ = [
    "TruePlant",
    "StepResult",
    "RunRecord",
    "SmpcController",
    "NominalMpcController",
    "ZeroController",
    "MonteCarloSetup",
    "ControllerStats",
    "HistogramSet",
    "MonteCarloSummary",
    "sample_plant",
    "simulate_closed_loop",
    "nominal_mpc_controller",
    "monte_carlo",
]


@dataclass(frozen=True, eq=False)
class TruePlant:
    """One realized plant: fixed parameter draw plus additive noise."""

    theta: np.ndarray
    a: np.ndarray
    b: np.ndarray
    noise_gain: np.ndarray
    noise_cov: np.ndarray
    noise_factor: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.noise_factor is None:
            vals, vecs = np.linalg.eigh(np.asarray(self.noise_cov, dtype=float))
            factor = vecs * np.sqrt(np.clip(vals, 0.0, None))
            object.__setattr__(self, "noise_factor", factor)

    @property
    def n_x(self) -> int:
        return self.a.shape[0]

    @property
    def n_w(self) -> int:
        return self.noise_gain.shape[1]

    def step(self, x: np.ndarray, u: np.ndarray, w: np.ndarray) -> np.ndarray:
        return self.a @ x + self.b @ u + self.noise_gain @ w


def sample_plant(system: UncertainLinearSystem, rng: np.random.Generator) -> TruePlant:
    """Draw one parameter vector and freeze the plant matrices."""
    theta = np.array([m.sample(rng) for m in system.marginals])
    return TruePlant(
        theta=theta,
        a=system.a_matrix(theta),
        b=system.b_matrix(theta),
        noise_gain=np.asarray(system.noise_gain, dtype=float),
        noise_cov=np.asarray(system.noise_cov, dtype=float),
    )


@dataclass(frozen=True)
class StepResult:
    """Input applied at one step plus solver diagnostics."""

    u: np.ndarray
    value: float = float("nan")
    fallback: bool = False


class SmpcController:
    """Receding-horizon wrapper around a chance-constrained problem.

    With ``allow_softening`` (the default) infeasible steps are retried
    with slack-penalized constraints and flagged; without it the step
    raises and the surrounding run is aborted.
    """

    def __init__(self, prob: ctrl.SmpcProblem, allow_softening: bool = True):
        self.prob = prob
        self.allow_softening = allow_softening

    def step(self, x: np.ndarray) -> StepResult:
        sol = ctrl.solve_smpc(self.prob, x, allow_softening=self.allow_softening)
        u = sol.policy.offsets[0] + sol.policy.gains[0] @ x
        return StepResult(u=u, value=sol.value, fallback=sol.fallback)


class ZeroController:
    """Applies no input; the open-loop baseline."""

    def __init__(self, n_u: int):
        self.n_u = n_u

    def step(self, x: np.ndarray) -> StepResult:
        return StepResult(u=np.zeros(self.n_u), value=0.0)


class NominalMpcController:
    """Certainty-equivalence MPC at the mean parameters.

    Predicts with the mean-parameter matrices, enforces the state
    constraints as hard rows on the predicted trajectory at stages
    ``1 .. N-1``, and (optionally) pins the predicted terminal state to the
    origin, eliminated through a particular solution plus a null-space
    basis.  Infeasible instances fall back to L1-penalized constraint
    slacks; the terminal pin is kept because it is eliminated, not imposed.
    """

    def __init__(
        self,
        a: np.ndarray,
        b: np.ndarray,
        weights: ctrl.CostWeights,
        constraints: Sequence[ctrl.ChanceConstraint],
        horizon: int,
        terminal_equality: bool = True,
    ):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        n_x, n_u = b.shape
        N = int(horizon)
        if N < 1:
            raise ParameterError("horizon must be at least 1")
        self.n_u, self.horizon = n_u, N
        self.fallback_weight = 1e4

        # prediction maps: x_i = powers[i] x0 + reach[i] U
        powers = [np.eye(n_x)]
        for _ in range(N):
            powers.append(a @ powers[-1])
        reach = [np.zeros((n_x, N * n_u))]
        for i in range(N):
            nxt = a @ reach[i]
            nxt[:, i * n_u : (i + 1) * n_u] += b
            reach.append(nxt)

        H = np.zeros((N * n_u, N * n_u))
        Fmat = np.zeros((N * n_u, n_x))
        X0 = np.zeros((n_x, n_x))
        for i in range(N):
            sel = slice(i * n_u, (i + 1) * n_u)
            H += 2.0 * reach[i].T @ weights.q @ reach[i]
            H[sel, sel] += 2.0 * weights.r
            Fmat += 2.0 * reach[i].T @ weights.q @ powers[i]
            X0 += powers[i].T @ weights.q @ powers[i]
        if not terminal_equality:
            H += 2.0 * reach[N].T @ weights.q @ reach[N]
            Fmat += 2.0 * reach[N].T @ weights.q @ powers[N]
            X0 += powers[N].T @ weights.q @ powers[N]
        H = 0.5 * (H + H.T)
        if np.linalg.eigvalsh(H).min() <= 1e-12:
            H += 2.0 * max(weights.epsilon, 1e-10) * np.eye(N * n_u)

        rows, offs, stages = [], [], []
        for i in range(1, N):
            for cc in constraints:
                rows.append(cc.c @ reach[i])
                offs.append(cc.c @ powers[i])
                stages.append(float(cc.d))
        self._ineq_rows = np.array(rows) if rows else np.zeros((0, N * n_u))
        self._ineq_offsets = np.array(offs) if offs else np.zeros((0, n_x))
        self._ineq_bounds = np.array(stages)

        self._terminal = None
        if terminal_equality:
            g_n = reach[N]
            if np.linalg.matrix_rank(g_n) < n_x:
                raise ParameterError(
                    "terminal pin needs a reachable origin within the horizon"
                )
            _, s, vt = np.linalg.svd(g_n)
            null_dim = N * n_u - int(np.sum(s > s[0] * 1e-12))
            z_basis = vt[N * n_u - null_dim :].T if null_dim else np.zeros((N * n_u, 0))
            self._terminal = (g_n, np.linalg.pinv(g_n), z_basis, powers[N])
        self._H, self._Fmat, self._X0 = H, Fmat, X0

    def plan(self, x: np.ndarray):
        """Full open-loop input plan from state x; (U, value, fallback)."""
        x = np.asarray(x, dtype=float).ravel()
        f = self._Fmat @ x
        const = float(x @ self._X0 @ x)
        A_rows = self._ineq_rows
        b_rows = self._ineq_bounds - self._ineq_offsets @ x
        if self._terminal is None:
            return self._solve(self._H, f, A_rows, b_rows, const, identity=None)
        g_n, g_pinv, z_basis, p_n = self._terminal
        u_part = g_pinv @ (-p_n @ x)
        if z_basis.shape[1] == 0:
            value = 0.5 * u_part @ self._H @ u_part + f @ u_part + const
            resid = A_rows @ u_part - b_rows if len(b_rows) else np.zeros(0)
            return u_part, float(value), bool(resid.size and resid.max() > 1e-9)
        H_v = z_basis.T @ self._H @ z_basis
        f_v = z_basis.T @ (self._H @ u_part + f)
        const_v = const + 0.5 * u_part @ self._H @ u_part + f @ u_part
        A_v = A_rows @ z_basis
        b_v = b_rows - A_rows @ u_part
        u_v, value, fb = self._solve(H_v, f_v, A_v, b_v, const_v, identity=None)
        return u_part + z_basis @ u_v, value, fb

    def _solve(self, H, f, A_rows, b_rows, const, identity):
        try:
            sol = solve_qp(H, f, A_rows if len(b_rows) else None, b_rows if len(b_rows) else None)
            return sol.z, float(sol.value + const), False
        except QpInfeasibleError:
            n = H.shape[0]
            m = len(b_rows)
            H_ext = np.zeros((n + m, n + m))
            H_ext[:n, :n] = H
            H_ext[n:, n:] = 2e-8 * np.eye(m)
            f_ext = np.concatenate([f, self.fallback_weight * np.ones(m)])
            A_ext = np.zeros((2 * m, n + m))
            A_ext[:m, :n] = A_rows
            A_ext[:m, n:] = -np.eye(m)
            A_ext[m:, n:] = -np.eye(m)
            b_ext = np.concatenate([b_rows, np.zeros(m)])
            sol = solve_qp(H_ext, f_ext, A_ext, b_ext)
            return sol.z[:n], float(0.5 * sol.z[:n] @ H @ sol.z[:n] + f @ sol.z[:n] + const), True

    def step(self, x: np.ndarray) -> StepResult:
        u_plan, value, fallback = self.plan(x)
        return StepResult(u=u_plan[: self.n_u].copy(), value=value, fallback=fallback)


def nominal_mpc_controller(
    system: UncertainLinearSystem,
    weights: ctrl.CostWeights,
    constraints: Sequence[ctrl.ChanceConstraint],
    horizon: int,
    terminal_equality: bool = True,
) -> NominalMpcController:
    """Certainty-equivalence baseline at the parameter means."""
    theta_mean = np.array([m.mean for m in system.marginals])
    return NominalMpcController(
        a=system.a_matrix(theta_mean),
        b=system.b_matrix(theta_mean),
        weights=weights,
        constraints=constraints,
        horizon=horizon,
        terminal_equality=terminal_equality,
    )


@dataclass(frozen=True, eq=False)
class RunRecord:
    """One closed-loop trajectory with violation bookkeeping.

    An aborted run (solver failure with softening disabled) keeps its
    realized prefix; the unreached tail is NaN and never counts as a
    violation.
    """

    run_index: int
    theta: np.ndarray
    states: np.ndarray  # (T+1, n_x)
    inputs: np.ndarray  # (T, n_u)
    values: np.ndarray  # (T,)
    fallback_count: int
    violations: np.ndarray  # (T+1, n_constraints) boolean
    aborted: bool = False

    @property
    def violated_any(self) -> bool:
        """True when any constraint is crossed at any step after the first."""
        return bool(self.violations[1:].any())


def simulate_closed_loop(
    plant: TruePlant,
    controller,
    x0: np.ndarray,
    n_steps: int | None = None,
    constraints: Sequence[ctrl.ChanceConstraint] = (),
    noise: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    run_index: int = 0,
) -> RunRecord:
    """Roll the plant forward under a controller and record the run.

    Pass ``noise`` (T, n_w) for externally matched draws, or an ``rng`` to
    draw standard normals internally.
    """
    x = np.asarray(x0, dtype=float).ravel().copy()
    if noise is None:
        if n_steps is None or rng is None:
            raise ParameterError("need either a noise block or n_steps with an rng")
        noise = rng.standard_normal((int(n_steps), plant.n_w))
    noise = np.asarray(noise, dtype=float)
    T = noise.shape[0]
    states = np.full((T + 1, x.size), np.nan)
    inputs = np.full((T, plant.b.shape[1]), np.nan)
    values = np.full(T, np.nan)
    states[0] = x
    fallbacks = 0
    aborted = False
    for t in range(T):
        try:
            res = controller.step(x)
        except ctrl.SmpcInfeasibleError:
            aborted = True
            break
        u = np.asarray(res.u, dtype=float).ravel()
        x = plant.step(x, u, plant.noise_factor @ noise[t])
        states[t + 1] = x
        inputs[t] = u
        values[t] = res.value
        fallbacks += bool(res.fallback)
    if constraints:
        # NaN comparisons are False, so an aborted tail never counts
        viol = np.stack([states @ cc.c > cc.d for cc in constraints], axis=1)
    else:
        viol = np.zeros((T + 1, 0), dtype=bool)
    return RunRecord(
        run_index=run_index,
        theta=plant.theta.copy(),
        states=states,
        inputs=inputs,
        values=values,
        fallback_count=fallbacks,
        violations=viol,
        aborted=aborted,
    )


@dataclass(frozen=True, eq=False)
class MonteCarloSetup:
    """Shared scenario for paired controller comparisons."""

    system: UncertainLinearSystem
    controllers: Mapping[str, object]
    x0_mean: np.ndarray
    x0_std: np.ndarray
    n_steps: int
    constraints: tuple = ()
    histogram_times: tuple = ()
    histogram_bins: int = 20

    def __post_init__(self):
        x0_mean = np.asarray(self.x0_mean, dtype=float).ravel()
        x0_std = np.asarray(self.x0_std, dtype=float).ravel()
        if x0_mean.size != self.system.n_x or x0_std.size != self.system.n_x:
            raise ParameterError("initial-state moments must match the state dimension")
        if np.any(x0_std < 0.0):
            raise ParameterError("initial-state standard deviations must be nonnegative")
        bad = [t for t in self.histogram_times if not 0 <= int(t) <= self.n_steps]
        if bad:
            raise ParameterError(f"histogram times {bad} outside 0..{self.n_steps}")
        object.__setattr__(self, "x0_mean", x0_mean)
        object.__setattr__(self, "x0_std", x0_std)
        object.__setattr__(self, "constraints", tuple(self.constraints))
        object.__setattr__(self, "histogram_times", tuple(int(t) for t in self.histogram_times))


@dataclass(frozen=True, eq=False)
class ControllerStats:
    """Aggregates over the matched runs of one controller."""

    name: str
    runs: tuple
    mean_traj: np.ndarray  # (T+1, n_x)
    var_traj: np.ndarray  # (T+1, n_x) unbiased per-component variance
    violation_fraction: float
    violation_by_constraint: np.ndarray  # (n_constraints,) ever-violated fractions
    step_violation_rate: np.ndarray  # (T+1,) any-constraint rate per step
    fallback_total: int
    aborted_total: int
    mean_square_sum: float  # unweighted sum of |x|^2 + |u|^2, averaged over runs

    @property
    def fallback_rate(self) -> float:
        """Fallback activations per controller step."""
        n_steps = sum(r.inputs.shape[0] for r in self.runs)
        return self.fallback_total / n_steps if n_steps else 0.0


@dataclass(frozen=True, eq=False)
class HistogramSet:
    """Per-controller histograms of one state component at one time.

    All controllers share the bin edges, so bar-for-bar comparisons are
    meaningful; each count vector sums to the run count.
    """

    time: int
    state: int
    edges: np.ndarray
    counts: Mapping[str, np.ndarray]


@dataclass(frozen=True, eq=False)
class MonteCarloSummary:
    n_runs: int
    base_seed: int
    stats: Mapping[str, ControllerStats]
    histograms: tuple


def _run_draws(setup: MonteCarloSetup, base_seed: int, run_index: int):
    """Parameter, initial state, and noise draws for one run index.

    The order (plant, initial state, noise block) is part of the
    reproducibility contract; controllers share these draws exactly.
    """
    rng = np.random.default_rng(base_seed ^ run_index)
    plant = sample_plant(setup.system, rng)
    x0 = setup.x0_mean + setup.x0_std * rng.standard_normal(setup.x0_mean.size)
    noise = rng.standard_normal((setup.n_steps, plant.n_w))
    return plant, x0, noise


def monte_carlo(setup: MonteCarloSetup, n_runs: int, base_seed: int = 0) -> MonteCarloSummary:
    """Matched-seed Monte Carlo over every controller in the setup."""
    if n_runs < 1:
        raise ParameterError("n_runs must be positive")
    all_runs: dict[str, list] = {name: [] for name in setup.controllers}
    for i in range(n_runs):
        plant, x0, noise = _run_draws(setup, base_seed, i)
        for name, controller in setup.controllers.items():
            all_runs[name].append(
                simulate_closed_loop(
                    plant,
                    controller,
                    x0,
                    constraints=setup.constraints,
                    noise=noise,
                    run_index=i,
                )
            )

    stats = {}
    for name, runs in all_runs.items():
        states = np.stack([r.states for r in runs])  # (R, T+1, n_x)
        inputs = np.stack([r.inputs for r in runs])
        stats[name] = ControllerStats(
            name=name,
            runs=tuple(runs),
            mean_traj=states.mean(axis=0),
            var_traj=states.var(axis=0, ddof=1) if n_runs > 1 else np.zeros_like(states[0]),
            violation_fraction=float(np.mean([r.violated_any for r in runs])),
            violation_by_constraint=(
                np.mean([r.violations[1:].any(axis=0) for r in runs], axis=0)
                if setup.constraints
                else np.zeros(0)
            ),
            step_violation_rate=(
                np.stack([r.violations.any(axis=1) for r in runs]).mean(axis=0)
                if setup.constraints
                else np.zeros(setup.n_steps + 1)
            ),
            fallback_total=int(sum(r.fallback_count for r in runs)),
            aborted_total=int(sum(r.aborted for r in runs)),
            mean_square_sum=float(
                np.mean(np.sum(states[:, :-1] ** 2, axis=(1, 2)) + np.sum(inputs**2, axis=(1, 2)))
            ),
        )

    histograms = []
    for t in setup.histogram_times:
        at_time = {
            name: np.stack([r.states[t] for r in runs]) for name, runs in all_runs.items()
        }
        for k in range(setup.system.n_x):
            samples = {name: vals[:, k] for name, vals in at_time.items()}
            pooled = np.concatenate(list(samples.values()))
            lo, hi = float(pooled.min()), float(pooled.max())
            if hi <= lo:
                hi = lo + 1e-12
            edges = np.linspace(lo, hi, setup.histogram_bins + 1)
            counts = {
                name: np.histogram(vals, bins=edges)[0] for name, vals in samples.items()
            }
            histograms.append(HistogramSet(time=int(t), state=k, edges=edges, counts=counts))

    return MonteCarloSummary(
        n_runs=int(n_runs),
        base_seed=int(base_seed),
        stats=stats,
        histograms=tuple(histograms),
    )
