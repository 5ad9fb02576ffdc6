"""Mean/covariance propagation of the lifted coefficient dynamics."""

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import solve_discrete_lyapunov

from pcmpc.basis import build_basis
from pcmpc.controller import Policy
from pcmpc.distributions import MarginalDistribution
from pcmpc.errors import ParameterError
from pcmpc.galerkin import (
    LiftedPolicy,
    PolynomialMatrix,
    UncertainLinearSystem,
    lift_policy,
    lift_state,
    project_system,
)
from pcmpc.moments import (
    MomentState,
    MomentTrajectory,
    propagate,
    state_mean,
    state_second_moment,
    state_variance,
)

UNI = MarginalDistribution.uniform(-1.0, 1.0)


def scalar_dyn(a_entries, noise_cov, max_degree, b_const=1.0):
    a = PolynomialMatrix.from_entries([[a_entries]], n_params=1)
    b = PolynomialMatrix.constant([[b_const]], 1)
    system = UncertainLinearSystem(
        a, b, np.eye(1), np.asarray(noise_cov, dtype=float), (UNI,)
    )
    basis = build_basis((UNI,), max_degree)
    return project_system(system, basis), basis


def zero_policy(dyn, n_steps):
    big_gains = tuple(np.zeros((dyn.r, dyn.n)) for _ in range(n_steps))
    big_offsets = tuple(np.zeros(dyn.r) for _ in range(n_steps))
    return LiftedPolicy(big_gains=big_gains, big_offsets=big_offsets)


# ---------------------------------------------------------------------------
# exact recursions


def test_deterministic_limit_matches_linear_recursion():
    point = MarginalDistribution.uniform(0.8, 0.8)
    a = PolynomialMatrix.from_entries([[[((1,), 1.0)]]], n_params=1)
    b = PolynomialMatrix.constant([[1.0]], 1)
    system = UncertainLinearSystem(a, b, np.eye(1), np.zeros((1, 1)), (point,))
    basis = build_basis((point,), 0)
    dyn = project_system(system, basis)
    policy = LiftedPolicy(
        big_gains=(np.array([[-0.1]]),) * 4, big_offsets=(np.array([0.3]),) * 4
    )
    traj = propagate(dyn, policy, MomentState(mean=[2.0], cov=[[0.0]]))
    x = 2.0
    for i in range(4):
        u = -0.1 * x + 0.3
        x = 0.8 * x + u
        assert traj[i + 1].mean[0] == pytest.approx(x, rel=1e-14)
        assert traj[i + 1].cov[0, 0] == 0.0


def test_hand_rolled_recursion_three_steps():
    dyn, basis = scalar_dyn([((0,), 0.5), ((1,), 0.2)], [[0.04]], 2)
    policy = lift_policy(
        Policy(
            gains=(np.array([[-0.2]]),) * 3,
            offsets=(np.array([0.1]), np.array([0.0]), np.array([-0.3])),
        ),
        basis,
    )
    init = MomentState(mean=lift_state([1.5], basis), cov=np.zeros((dyn.n, dyn.n)))
    traj = propagate(dyn, policy, init)

    mean = init.mean.copy()
    cov = init.cov.copy()
    for i in range(3):
        acl = dyn.big_a + dyn.big_b @ policy.big_gains[i]
        mean = acl @ mean + dyn.big_b @ policy.big_offsets[i]
        cov = acl @ cov @ acl.T + dyn.big_f @ dyn.noise_cov @ dyn.big_f.T
        assert np.allclose(traj[i + 1].mean, mean, atol=1e-12)
        assert np.allclose(traj[i + 1].cov, cov, atol=1e-12)
    assert len(traj) == 4
    assert traj.horizon == 3


def test_zero_noise_keeps_zero_covariance():
    dyn, basis = scalar_dyn([((1,), 0.9)], [[0.0]], 3)
    init = MomentState(mean=lift_state([1.0], basis), cov=np.zeros((dyn.n, dyn.n)))
    traj = propagate(dyn, zero_policy(dyn, 6), init)
    for ms in traj.states:
        assert np.abs(ms.cov).max() == 0.0


def test_stable_loop_covariance_reaches_lyapunov_fixed_point():
    dyn, basis = scalar_dyn([((0,), 0.7)], [[0.09]], 2)
    init = MomentState(mean=np.zeros(dyn.n), cov=np.zeros((dyn.n, dyn.n)))
    traj = propagate(dyn, zero_policy(dyn, 400), init)
    fixed = solve_discrete_lyapunov(dyn.big_a, dyn.lifted_noise_cov)
    assert np.allclose(traj[-1].cov, fixed, atol=1e-12)
    # trace grows monotonically toward the fixed point
    traces = [np.trace(ms.cov) for ms in traj.states]
    assert all(t2 >= t1 - 1e-15 for t1, t2 in zip(traces, traces[1:]))


# ---------------------------------------------------------------------------
# physical-space readout


def test_state_mean_and_variance_of_lifted_point():
    basis = build_basis((UNI,), 2)
    lifted = lift_state(np.array([0.4, -1.2]), basis)
    ms = MomentState(mean=lifted, cov=np.zeros((lifted.size, lifted.size)))
    assert np.allclose(state_mean(ms, basis), [0.4, -1.2])
    assert np.abs(state_variance(ms, basis)).max() == 0.0
    second = state_second_moment(ms, basis)
    assert np.allclose(second, np.outer([0.4, -1.2], [0.4, -1.2]), atol=1e-14)


def test_second_moment_mixes_coefficients_and_covariance():
    basis = build_basis((UNI,), 1)
    mean = np.array([1.0, 0.5])
    cov = np.array([[0.0, 0.0], [0.0, 0.2]])
    ms = MomentState(mean=mean, cov=cov)
    # E[x^2] = mean_0^2 + (mean_1^2 + cov_11) <phi_1^2>
    expected = 1.0 + (0.25 + 0.2) / 3.0
    assert state_second_moment(ms, basis)[0, 0] == pytest.approx(expected, rel=1e-14)
    var = state_variance(ms, basis)[0, 0]
    assert var == pytest.approx(expected - 1.0, rel=1e-13)


def test_readout_matches_sampling_for_gaussian_coefficient_vector():
    # draw the coefficient vector itself from a Gaussian, then compare the
    # analytic readout with brute-force evaluation over (coeff, theta) pairs
    basis = build_basis((UNI,), 2)
    rng = np.random.default_rng(17)
    mean = rng.standard_normal(3)
    root = rng.standard_normal((3, 3)) * 0.3
    cov = root @ root.T
    ms = MomentState(mean=mean, cov=cov)

    n = 400_000
    coeff_draws = rng.multivariate_normal(mean, cov, size=n)
    thetas = rng.uniform(-1.0, 1.0, size=(n, 1))
    values = np.einsum("nk,nk->n", basis.eval_terms(thetas), coeff_draws)
    mu = state_mean(ms, basis)[0]
    var = state_variance(ms, basis)[0, 0]
    assert abs(values.mean() - mu) <= 4.0 * values.std() / np.sqrt(n)
    assert values.var() == pytest.approx(var, rel=0.02)


# ---------------------------------------------------------------------------
# reactor open loop against brute force


def test_reactor_open_loop_matches_sampled_system(vdv_experiment, vdv_open_loop_oracle):
    dyn = vdv_experiment.dynamics
    basis = vdv_experiment.basis
    x0 = np.asarray(vdv_experiment.config.simulation.x0_mean, dtype=float)
    init = MomentState(
        mean=lift_state(x0, basis), cov=np.zeros((dyn.n, dyn.n))
    )
    traj = propagate(dyn, zero_policy(dyn, 10), init)
    oracle = vdv_open_loop_oracle
    for i in range(1, 11):
        mu = state_mean(traj[i], basis)
        var = np.diag(state_variance(traj[i], basis))
        gap = np.abs(mu - oracle["means"][i])
        assert (gap <= 3.0 * oracle["mean_se"][i] + 1e-12).all()
        rel = np.abs(var - oracle["variances"][i]) / oracle["variances"][i]
        assert rel.max() <= 0.02


# ---------------------------------------------------------------------------
# validation


def test_moment_state_covariance_floor():
    ok = MomentState(mean=[0.0], cov=[[-5e-11]])
    assert ok.cov[0, 0] == 0.0
    with pytest.raises(ParameterError):
        MomentState(mean=[0.0], cov=[[-1e-9]])
    with pytest.raises(ParameterError):
        MomentState(mean=[0.0, 1.0], cov=[[1.0]])


def test_propagate_validation():
    dyn, basis = scalar_dyn([((0,), 0.5)], [[0.0]], 1)
    init = MomentState(mean=np.zeros(dyn.n), cov=np.zeros((dyn.n, dyn.n)))
    policy = zero_policy(dyn, 2)
    with pytest.raises(ParameterError):
        propagate(dyn, policy, init, n_steps=3)
    with pytest.raises(ParameterError):
        propagate(dyn, policy, init, n_steps=-1)
    bad_init = MomentState(mean=np.zeros(3), cov=np.zeros((3, 3)))
    with pytest.raises(ParameterError):
        propagate(dyn, policy, bad_init)
    short = propagate(dyn, policy, init, n_steps=0)
    assert len(short) == 1


@given(
    st.lists(st.floats(-2.0, 2.0), min_size=2, max_size=2),
    st.floats(0.0, 0.5),
    st.floats(-0.95, 0.95),
)
def test_propagated_covariance_stays_psd(mean2, noise, gain):
    dyn, basis = scalar_dyn([((0,), 0.4), ((1,), 0.3)], [[noise]], 1)
    policy = LiftedPolicy(
        big_gains=(np.full((dyn.r, dyn.n), gain),) * 5,
        big_offsets=(np.zeros(dyn.r),) * 5,
    )
    init = MomentState(
        mean=np.array(mean2), cov=np.diag(np.abs(np.array(mean2)) * 0.1)
    )
    traj = propagate(dyn, policy, init)
    for ms in traj.states:
        assert np.linalg.eigvalsh(ms.cov).min() >= -1e-10
        assert np.diag(state_variance(ms, basis)).min() >= 0.0
