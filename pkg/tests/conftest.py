"""Shared fixtures and brute-force oracles for the test suite.

The oracles here deliberately avoid the library's own propagation code:
moments come from vectorized simulation of the sampled parametric system,
and QP optima come from exhaustive active-set enumeration.  Tests compare
library output against these independent routes.
"""

import itertools
import time

import numpy as np
import pytest
from hypothesis import settings

from pcmpc import cli, config as config_mod, sim

settings.register_profile("ci", derandomize=True, max_examples=60, deadline=None)
settings.load_profile("ci")


# ---------------------------------------------------------------------------
# session fixtures for the bundled reactor experiment


@pytest.fixture(scope="session")
def vdv_path():
    return cli.bundled_config_path("vandevusse")


@pytest.fixture(scope="session")
def vdv_config(vdv_path):
    return config_mod.load_config(vdv_path)


@pytest.fixture(scope="session")
def vdv_experiment(vdv_config):
    return config_mod.assemble_experiment(vdv_config)


_VDV_TIMING = {}


@pytest.fixture(scope="session")
def vdv_summary(vdv_experiment):
    cfg = vdv_experiment.config.simulation
    start = time.perf_counter()
    summary = sim.monte_carlo(vdv_experiment.setup, n_runs=cfg.runs, base_seed=cfg.seed)
    _VDV_TIMING["seconds"] = time.perf_counter() - start
    return summary


@pytest.fixture(scope="session")
def vdv_summary_seconds(vdv_summary):
    return _VDV_TIMING["seconds"]


@pytest.fixture(scope="session")
def vdv_open_loop_oracle(vdv_experiment):
    """Brute-force stage moments of the reactor under zero input.

    10^5 sampled (theta, noise) trajectories of the true system from the
    configured x0_mean, stages 0..10.
    """
    system = vdv_experiment.system
    x0 = np.asarray(vdv_experiment.config.simulation.x0_mean, dtype=float)
    n_u = system.n_u
    gains = [np.zeros((n_u, system.n_x))] * 10
    offsets = [np.zeros(n_u)] * 10
    return sample_true_moments(system, x0, gains, offsets, n_samples=100_000, seed=31)


# ---------------------------------------------------------------------------
# sampled-system oracles


def psd_factor(cov):
    """Factor G with G G^T = cov for a symmetric PSD matrix."""
    vals, vecs = np.linalg.eigh(np.asarray(cov, dtype=float))
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def sample_true_moments(system, x0, gains, offsets, n_samples, seed):
    """Stage means and variances of x+ = A(theta) x + B(theta) u + F w.

    The affine policy u_i = gains[i] x + offsets[i] is applied to the sampled
    true state.  Returns a dict with stage-indexed arrays ``means`` and
    ``variances`` of shape (n_steps + 1, n_x) plus the standard error of each
    mean for tolerance scaling.
    """
    rng = np.random.default_rng(seed)
    x0 = np.asarray(x0, dtype=float)
    n_steps = len(gains)
    thetas = np.column_stack([m.sample(rng, n_samples) for m in system.marginals])
    a_s = system.a_matrix.eval_batch(thetas)
    b_s = system.b_matrix.eval_batch(thetas)
    factor = psd_factor(system.noise_cov)
    f_mat = np.asarray(system.noise_gain, dtype=float)

    x = np.broadcast_to(x0, (n_samples, x0.size)).copy()
    means = [x0.copy()]
    variances = [np.zeros_like(x0)]
    mean_se = [np.zeros_like(x0)]
    for i in range(n_steps):
        u = x @ gains[i].T + offsets[i]
        w = rng.standard_normal((n_samples, factor.shape[1])) @ factor.T
        x = (
            np.einsum("sij,sj->si", a_s, x)
            + np.einsum("sij,sj->si", b_s, u)
            + w @ f_mat.T
        )
        means.append(x.mean(axis=0))
        variances.append(x.var(axis=0))
        mean_se.append(x.std(axis=0) / np.sqrt(n_samples))
    return {
        "means": np.array(means),
        "variances": np.array(variances),
        "mean_se": np.array(mean_se),
        "n_samples": n_samples,
    }


def sample_policy_cost(system, dyn, policy, weights, terminal, x0, n_samples, seed):
    """Monte Carlo estimate of the expected finite-horizon cost of a policy.

    Stage costs are accumulated along sampled true-system trajectories; the
    terminal quadratic is evaluated on the lifted coefficient recursion driven
    by the same noise draws.  Returns (estimate, standard_error).
    """
    rng = np.random.default_rng(seed)
    x0 = np.asarray(x0, dtype=float)
    n_steps = len(policy.gains)
    q = np.asarray(weights.q, dtype=float)
    r = np.asarray(weights.r, dtype=float)
    thetas = np.column_stack([m.sample(rng, n_samples) for m in system.marginals])
    a_s = system.a_matrix.eval_batch(thetas)
    b_s = system.b_matrix.eval_batch(thetas)
    factor = psd_factor(system.noise_cov)
    f_mat = np.asarray(system.noise_gain, dtype=float)

    p1 = dyn.n_terms
    e1 = np.zeros((p1, 1))
    e1[0, 0] = 1.0
    x = np.broadcast_to(x0, (n_samples, x0.size)).copy()
    phi = np.zeros((n_samples, dyn.n))
    phi[:, ::p1] = x0
    total = np.zeros(n_samples)
    for i in range(n_steps):
        gain = np.asarray(policy.gains[i], dtype=float)
        offset = np.asarray(policy.offsets[i], dtype=float)
        u = x @ gain.T + offset
        total += np.einsum("si,ij,sj->s", x, q, x)
        total += np.einsum("si,ij,sj->s", u, r, u)
        w = rng.standard_normal((n_samples, factor.shape[1])) @ factor.T
        x = (
            np.einsum("sij,sj->si", a_s, x)
            + np.einsum("sij,sj->si", b_s, u)
            + w @ f_mat.T
        )
        big_gain = np.kron(gain, np.eye(p1))
        big_offset = np.kron(offset[:, None], e1).ravel()
        phi = (
            phi @ (dyn.big_a + dyn.big_b @ big_gain).T
            + dyn.big_b @ big_offset
            + w @ dyn.big_f.T
        )
    if terminal is not None:
        total += np.einsum("si,ij,sj->s", phi, np.asarray(terminal, dtype=float), phi)
    return float(total.mean()), float(total.std() / np.sqrt(n_samples))


# ---------------------------------------------------------------------------
# QP enumeration oracle


def qp_enumeration_oracle(H, f, A, b):
    """Global minimum of 1/2 z'Hz + f'z s.t. Az <= b by active-set enumeration.

    Solves the KKT equality system for every candidate active subset, keeps
    candidates that are primal feasible with nonnegative multipliers, and
    returns (z, value) of the best.  Exponential in the row count; only for
    small test instances.
    """
    H = np.asarray(H, dtype=float)
    f = np.asarray(f, dtype=float)
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    n = H.shape[0]
    m = A.shape[0]
    best_z = None
    best_val = np.inf
    for size in range(0, min(m, n) + 1):
        for subset in itertools.combinations(range(m), size):
            rows = list(subset)
            a_w = A[rows]
            kkt = np.zeros((n + size, n + size))
            kkt[:n, :n] = H
            kkt[:n, n:] = a_w.T
            kkt[n:, :n] = a_w
            rhs = np.concatenate([-f, b[rows]])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                continue
            z = sol[:n]
            lam = sol[n:]
            if size and lam.min() < -1e-9:
                continue
            if m and (A @ z - b).max() > 1e-9:
                continue
            val = 0.5 * z @ H @ z + f @ z
            if val < best_val - 1e-12:
                best_val = val
                best_z = z
    return best_z, best_val


# ---------------------------------------------------------------------------
# small config factory for CLI and schema tests


def minimal_config_dict():
    """A fresh, fast, valid experiment dict: scalar x+ = theta x + u + w."""
    return {
        "uncertainty": {
            "marginals": [{"kind": "uniform", "low": 0.4, "high": 0.6}],
        },
        "system": {
            "a": [[[{"multi_index": [1], "coefficient": 1.0}]]],
            "b": [[[{"multi_index": [0], "coefficient": 1.0}]]],
            "noise_cov": [[1e-6]],
        },
        "gpc": {"max_degree": 2},
        "controller": {
            "q": [[1.0]],
            "r": [[1.0]],
            "horizon": 4,
            "constraints": [{"c": [1.0], "bound": 2.0, "beta": 0.9}],
        },
        "simulation": {
            "steps": 5,
            "runs": 2,
            "seed": 1,
            "x0_mean": [0.5],
            "x0_std": [0.1],
        },
    }
