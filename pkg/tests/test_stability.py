"""Certificates: Lyapunov solves, drift and value bounds, boundedness flag."""

import dataclasses
import math

import numpy as np
import pytest

from pcmpc import controller as ctrl
from pcmpc import stability
from pcmpc.basis import build_basis
from pcmpc.distributions import MarginalDistribution
from pcmpc.errors import (
    CertificateError,
    ConditioningError,
    ParameterError,
)
from pcmpc.galerkin import PolynomialMatrix, UncertainLinearSystem, project_system
from pcmpc.sim import SmpcController, TruePlant, ZeroController, simulate_closed_loop

UNI = MarginalDistribution.uniform(-1.0, 1.0)


def constant_dyn(a, b, marginal=UNI, max_degree=1, noise=None):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    n_x = a.shape[0]
    cov = np.zeros((n_x, n_x)) if noise is None else np.asarray(noise, dtype=float)
    system = UncertainLinearSystem(
        PolynomialMatrix.constant(a, 1),
        PolynomialMatrix.constant(np.atleast_2d(b), 1),
        np.eye(n_x),
        cov,
        (marginal,),
    )
    return project_system(system, build_basis((marginal,), max_degree))


# ---------------------------------------------------------------------------
# terminal gain


def test_terminal_gain_matches_scalar_riccati():
    dyn = constant_dyn([[0.5]], [[1.0]])
    weights = ctrl.CostWeights(q=np.eye(1), r=np.eye(1), epsilon=0.0)
    k = stability.terminal_gain(dyn, weights)
    # scalar discrete Riccati fixed point by iteration
    s = 1.0
    for _ in range(200):
        s = 1.0 + 0.25 * s - (0.5 * s) ** 2 / (1.0 + s)
    k_expected = -(0.5 * s) / (1.0 + s)
    assert k[0, 0] == pytest.approx(k_expected, rel=1e-12)
    # the gain stabilizes the mean pair
    assert abs(0.5 + k[0, 0]) < 1.0


def test_terminal_gain_vanishes_under_huge_input_weight():
    dyn = constant_dyn([[0.5]], [[1.0]])
    weights = ctrl.CostWeights(q=np.eye(1), r=np.eye(1) * 1e12, epsilon=0.0)
    k = stability.terminal_gain(dyn, weights)
    assert abs(k[0, 0]) < 1e-6


def test_terminal_gain_requires_positive_input_weight():
    dyn = constant_dyn([[0.5]], [[1.0]])
    weights = ctrl.CostWeights(q=np.eye(1), r=np.zeros((1, 1)), terminal=None, epsilon=0.0)
    with pytest.raises(ConditioningError):
        stability.terminal_gain(dyn, weights)


# ---------------------------------------------------------------------------
# Lyapunov solve


def test_solve_lyapunov_scalar_closed_form():
    p = stability.solve_lyapunov(np.array([[0.5]]), np.eye(1), 0.1)
    assert p[0, 0] == pytest.approx(1.1 / 0.75, abs=1e-12)


def test_solve_lyapunov_lifted_scalar_closed_form():
    # constant a = 0.5 on a degree-1 basis: blocks decouple, entry (1, 1)
    # carries the Legendre norm 1/3
    dyn = constant_dyn([[0.5]], [[1.0]])
    acl = dyn.big_a  # kron(0.5, I)
    m = np.kron(np.eye(1), np.diag(dyn.basis.norms))
    p = stability.solve_lyapunov(acl, m, 0.1)
    assert p[0, 0] == pytest.approx(1.1 / 0.75, abs=1e-12)
    assert p[1, 1] == pytest.approx(1.1 / (3.0 * 0.75), abs=1e-12)
    assert abs(p[0, 1]) <= 1e-14


def test_solve_lyapunov_zero_weight_gives_zero():
    p = stability.solve_lyapunov(np.array([[0.9]]), np.zeros((1, 1)), 0.2)
    assert p[0, 0] == 0.0


def test_solve_lyapunov_random_stable_residual():
    rng = np.random.default_rng(13)
    raw = rng.standard_normal((4, 4))
    acl = 0.9 * raw / np.max(np.abs(np.linalg.eigvals(raw)))
    root = rng.standard_normal((4, 4))
    m = root @ root.T
    p = stability.solve_lyapunov(acl, m, 0.1)
    residual = np.abs(acl.T @ p @ acl - p + 1.1 * m).max()
    assert residual <= 1e-10 * max(1.0, np.abs(m).max())
    assert np.linalg.eigvalsh(p).min() >= -1e-10


def test_solve_lyapunov_rejects_bad_inputs():
    with pytest.raises(ParameterError):
        stability.solve_lyapunov(np.eye(1) * 0.5, np.eye(1), 0.0)
    with pytest.raises(ParameterError):
        stability.solve_lyapunov(np.eye(1) * 0.5, np.eye(1), -0.1)
    with pytest.raises(ConditioningError):
        stability.solve_lyapunov(np.array([[1.1]]), np.eye(1), 0.1)
    with pytest.raises(ConditioningError):
        stability.solve_lyapunov(np.array([[1.0]]), np.eye(1), 0.1)


# ---------------------------------------------------------------------------
# certificate assembly


def test_certificate_fields_and_invariants(vdv_experiment):
    cert = vdv_experiment.certificate
    dyn = vdv_experiment.dynamics
    assert cert is not None
    assert 0.0 < cert.spectral_radius < 1.0
    assert cert.residual <= 1e-9 * max(1.0, np.abs(cert.stage_weight).max())
    # stage weight re-derived from public pieces
    weights = vdv_experiment.problem.weights
    expected_m = np.kron(
        weights.q + cert.gain.T @ weights.r @ cert.gain,
        np.diag(dyn.basis.norms),
    )
    assert np.allclose(cert.stage_weight, expected_m, atol=1e-12)
    assert cert.drift_offset == pytest.approx(
        float(np.trace(cert.lyapunov @ dyn.lifted_noise_cov)), rel=1e-12
    )
    assert np.allclose(cert.big_gain, np.kron(cert.gain, np.eye(dyn.n_terms)))
    assert np.linalg.eigvalsh(cert.lyapunov).min() >= -1e-10


def test_certificate_rejects_nonstabilizing_gain():
    dyn = constant_dyn([[2.0]], [[1.0]])
    weights = ctrl.CostWeights(q=np.eye(1), r=np.eye(1))
    with pytest.raises(CertificateError) as err:
        stability.build_certificate(dyn, weights, gain=np.zeros((1, 1)))
    assert err.value.spectral_radius is not None
    assert err.value.spectral_radius == pytest.approx(2.0, abs=1e-12)


def test_terminal_gain_unstabilizable_pair_raises():
    dyn = constant_dyn([[2.0]], [[0.0]])
    weights = ctrl.CostWeights(q=np.eye(1), r=np.eye(1))
    with pytest.raises(ConditioningError):
        stability.terminal_gain(dyn, weights)


def test_certificate_accepts_user_gain():
    dyn = constant_dyn([[0.9]], [[1.0]])
    weights = ctrl.CostWeights(q=np.eye(1), r=np.eye(1))
    cert = stability.build_certificate(dyn, weights, gain=np.array([[-0.5]]))
    assert cert.spectral_radius == pytest.approx(0.4, abs=1e-12)
    with pytest.raises(ParameterError):
        stability.build_certificate(dyn, weights, gain=np.zeros((2, 1)))


# ---------------------------------------------------------------------------
# residual and drift checks


def test_residual_check_pass_and_perturbed_negative_control(vdv_experiment):
    cert = vdv_experiment.certificate
    dyn = vdv_experiment.dynamics
    report = stability.residual_check(cert, dyn)
    assert report.passed
    assert report.residual <= report.tolerance
    bad = dataclasses.replace(cert, lyapunov=1.1 * cert.lyapunov)
    bad_report = stability.residual_check(bad, dyn)
    assert not bad_report.passed


def test_drift_check_reactor(vdv_experiment):
    cert = vdv_experiment.certificate
    dyn = vdv_experiment.dynamics
    report = stability.drift_check(cert, dyn, rng=np.random.default_rng(0))
    assert report.passed
    assert report.max_drift <= 1e-8
    assert report.n_exterior >= 9000
    assert report.identity_gap <= 1e-10
    assert report.mc_gap_sigmas <= 4.0


def test_drift_identity_from_public_pieces(vdv_experiment):
    # stage cost minus current value plus expected next value collapses to
    # -delta z'Mz + b for every z, by the Lyapunov equation
    cert = vdv_experiment.certificate
    dyn = vdv_experiment.dynamics
    acl = dyn.big_a + dyn.big_b @ cert.big_gain
    rng = np.random.default_rng(2)
    for _ in range(20):
        z = rng.standard_normal(dyn.n)
        stage = z @ cert.stage_weight @ z
        value_now = z @ cert.lyapunov @ z
        expected_next = (acl @ z) @ cert.lyapunov @ (acl @ z) + cert.drift_offset
        lhs = stage + expected_next - value_now
        rhs = -cert.delta * (z @ cert.stage_weight @ z) + cert.drift_offset
        assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


def test_drift_zero_on_sublevel_boundary(vdv_experiment):
    cert = vdv_experiment.certificate
    dyn = vdv_experiment.dynamics
    rng = np.random.default_rng(8)
    for _ in range(5):
        v = rng.standard_normal(dyn.n)
        level = v @ cert.stage_weight @ v
        z = v * math.sqrt(cert.drift_offset / (cert.delta * level))
        drift = -cert.delta * (z @ cert.stage_weight @ z) + cert.drift_offset
        assert drift == pytest.approx(0.0, abs=1e-10 * max(1.0, cert.drift_offset))


# ---------------------------------------------------------------------------
# value bounds


def test_value_bound_reactor(vdv_experiment):
    report = stability.value_bound_check(
        vdv_experiment.problem, rng=np.random.default_rng(1), n_samples=200
    )
    assert report.passed
    assert report.max_suboptimal_gap <= 1e-9
    assert report.max_optimal_gap <= 1e-9
    assert report.n_samples == 200


def test_value_bound_noise_free_problem():
    dyn = constant_dyn([[0.7]], [[1.0]])
    weights = ctrl.CostWeights(q=np.eye(1), r=np.eye(1))
    prob = ctrl.build_problem(dyn, 5, weights)
    report = stability.value_bound_check(prob, rng=np.random.default_rng(3), n_samples=50)
    assert report.passed
    # no noise: the frozen-gain value at the origin is exactly zero and the
    # chain collapses to 0 <= 0 <= 0
    sol = ctrl.solve_fixed_gain(prob, np.zeros(1))
    assert sol.value == pytest.approx(0.0, abs=1e-12)
    assert prob.certificate.drift_offset == pytest.approx(0.0, abs=1e-15)


def test_origin_value_bounded_by_horizon_times_offset(vdv_experiment):
    prob = vdv_experiment.problem
    cert = vdv_experiment.certificate
    sol = ctrl.solve_fixed_gain(prob, np.zeros(2))
    assert sol.value <= prob.horizon * cert.drift_offset + 1e-9


# ---------------------------------------------------------------------------
# boundedness trace


def stable_scalar_problem(noise=0.0, horizon=8):
    point = MarginalDistribution.uniform(1.0, 1.0)
    dyn = constant_dyn(
        [[0.9]], [[1.0]], marginal=point, max_degree=0,
        noise=None if noise == 0.0 else [[noise]],
    )
    weights = ctrl.CostWeights(q=np.eye(1), r=np.eye(1))
    return ctrl.build_problem(dyn, horizon, weights)


def test_boundedness_trace_monotone_without_noise():
    prob = stable_scalar_problem()
    plant = TruePlant(
        theta=np.array([1.0]), a=np.array([[0.9]]), b=np.array([[1.0]]),
        noise_gain=np.eye(1), noise_cov=np.zeros((1, 1)),
    )
    run = simulate_closed_loop(
        plant, SmpcController(prob), np.array([2.0]), noise=np.zeros((30, 1))
    )
    report = stability.boundedness_trace(run, prob=prob)
    assert not report.diverged
    assert np.diff(report.values).max() <= 1e-9
    assert report.values[0] > report.values[-1]


def test_boundedness_trace_reactor_and_shift(vdv_experiment):
    prob = vdv_experiment.problem
    system = vdv_experiment.system
    rng = np.random.default_rng(4)
    theta = np.array([system.marginals[0].mean])
    plant = TruePlant(
        theta=theta,
        a=system.a_matrix(theta),
        b=system.b_matrix(theta),
        noise_gain=np.asarray(system.noise_gain),
        noise_cov=np.asarray(system.noise_cov),
    )
    run = simulate_closed_loop(
        plant, SmpcController(prob), np.array([0.5, 0.1]), n_steps=12, rng=rng
    )
    report = stability.boundedness_trace(run, prob=prob, n_noise=500)
    assert not report.diverged
    assert report.shift_lhs is not None and np.isfinite(report.shift_lhs)
    # the lifted prediction carries the parameter spread, so it can only
    # sit above the mean-parameter step, up to sampling resolution
    assert report.shift_gap >= -1e-8
    assert abs(report.shift_gap) <= 1e-2 * max(1.0, abs(report.shift_lhs))


def test_boundedness_trace_flags_divergence():
    point = MarginalDistribution.uniform(1.0, 1.0)
    dyn = constant_dyn([[1.5]], [[1.0]], marginal=point, max_degree=0)
    weights = ctrl.CostWeights(q=np.eye(1), r=np.eye(1), terminal=None)
    prob = ctrl.build_problem(dyn, 5, weights, gain=np.zeros((1, 1)))
    plant = TruePlant(
        theta=np.array([1.0]), a=np.array([[1.5]]), b=np.array([[1.0]]),
        noise_gain=np.eye(1), noise_cov=np.zeros((1, 1)),
    )
    run = simulate_closed_loop(
        plant, ZeroController(1), np.array([1.0]), noise=np.zeros((40, 1))
    )
    report = stability.boundedness_trace(run, prob=prob)
    assert report.diverged


def test_boundedness_trace_certificate_surrogate(vdv_experiment):
    cert = vdv_experiment.certificate
    states = np.linspace([1.0, 1.0], [0.1, 0.1], 10)

    class FakeRun:
        pass

    run = FakeRun()
    run.states = states
    report = stability.boundedness_trace(run, cert=cert)
    assert not report.diverged
    assert report.shift_lhs is None
    assert len(report.values) == 10
    with pytest.raises(ParameterError):
        stability.boundedness_trace(run)
