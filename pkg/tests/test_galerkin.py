"""Galerkin projection of parameter-dependent linear dynamics."""

import numpy as np
import pytest

from pcmpc.basis import build_basis, project_function, triple_products
from pcmpc.controller import Policy
from pcmpc.distributions import MarginalDistribution
from pcmpc.errors import DegreeOverflowError, ParameterError
from pcmpc.galerkin import (
    PolynomialMatrix,
    UncertainLinearSystem,
    lift_policy,
    lift_state,
    project_system,
)

UNI = MarginalDistribution.uniform(-1.0, 1.0)


def make_system(a_pm, b_pm, marginals, noise_cov=None, noise_gain=None):
    n_x = a_pm.shape[0]
    cov = np.zeros((n_x, n_x)) if noise_cov is None else np.asarray(noise_cov)
    gain = np.eye(n_x) if noise_gain is None else np.asarray(noise_gain)
    return UncertainLinearSystem(a_pm, b_pm, gain, cov, tuple(marginals))


# ---------------------------------------------------------------------------
# polynomial matrices


def test_polynomial_matrix_constant_and_entries():
    pm = PolynomialMatrix.constant([[1.0, 2.0], [3.0, 4.0]], n_params=2)
    assert pm.degree() == 0
    assert np.allclose(pm(np.array([0.3, -0.7])), [[1.0, 2.0], [3.0, 4.0]])

    entries = [
        [[((0, 0), 1.0), ((1, 0), 2.0)], []],
        [[((0, 2), -1.0)], [((1, 1), 0.5)]],
    ]
    pm2 = PolynomialMatrix.from_entries(entries, n_params=2)
    assert pm2.degree() == 2
    theta = np.array([0.4, -0.3])
    expected = np.array(
        [
            [1.0 + 2.0 * 0.4, 0.0],
            [-1.0 * 0.09, 0.5 * 0.4 * -0.3],
        ]
    )
    assert np.allclose(pm2(theta), expected, atol=1e-14)
    assert pm2.entry_terms(0, 1) == []
    assert len(pm2.entry_terms(1, 0)) == 1


def test_polynomial_matrix_eval_batch_matches_pointwise():
    entries = [[[((1,), 1.0), ((3,), -0.2)]]]
    pm = PolynomialMatrix.from_entries(entries, n_params=1)
    rng = np.random.default_rng(3)
    thetas = rng.uniform(-1.0, 1.0, size=(50, 1))
    batch = pm.eval_batch(thetas)
    assert batch.shape == (50, 1, 1)
    for k in range(50):
        assert np.allclose(batch[k], pm(thetas[k]), atol=1e-15)


def test_polynomial_matrix_degree_over_selected_dims():
    entries = [[[((2, 1), 1.0)]]]
    pm = PolynomialMatrix.from_entries(entries, n_params=2)
    assert pm.degree() == 3
    assert pm.degree(active_dims=(0,)) == 2
    assert pm.degree(active_dims=(1,)) == 1
    assert pm.degree(active_dims=()) == 0


# ---------------------------------------------------------------------------
# projected dynamics


def test_constant_system_projects_to_kron_identity():
    a = np.array([[0.9, 0.1], [0.0, 0.8]])
    b = np.array([[1.0], [0.5]])
    system = make_system(
        PolynomialMatrix.constant(a, 1), PolynomialMatrix.constant(b, 1), (UNI,)
    )
    basis = build_basis((UNI,), 2)
    dyn = project_system(system, basis)
    p1 = basis.n_terms
    assert np.allclose(dyn.big_a, np.kron(a, np.eye(p1)), atol=1e-12)
    assert np.allclose(dyn.big_b, np.kron(b, np.eye(p1)), atol=1e-12)
    assert dyn.n == 2 * p1
    assert dyn.r == 1 * p1


def test_scalar_linear_parameter_anchor():
    # x+ = theta x with theta uniform on [-1, 1] and a degree-1 basis
    a = PolynomialMatrix.from_entries([[[((1,), 1.0)]]], n_params=1)
    b = PolynomialMatrix.constant([[0.0]], 1)
    system = make_system(a, b, (UNI,))
    basis = build_basis((UNI,), 1)
    dyn = project_system(system, basis)
    assert np.allclose(dyn.big_a, [[0.0, 1.0 / 3.0], [1.0, 0.0]], atol=1e-12)
    assert np.allclose(dyn.a_coeffs[0], [[0.0]], atol=1e-14)
    assert np.allclose(dyn.a_coeffs[1], [[1.0]], atol=1e-14)


def test_reactor_coefficient_structure(vdv_experiment):
    system = vdv_experiment.system
    dyn = vdv_experiment.dynamics
    marg = system.marginals[0]
    a0 = dyn.a_coeffs[0]
    assert a0[0, 0] == pytest.approx(marg.mean, rel=1e-12)
    assert a0[0, 1] == pytest.approx(0.0, abs=1e-14)
    assert a0[1, 0] == pytest.approx(0.088, rel=1e-14)
    assert a0[1, 1] == pytest.approx(0.819, rel=1e-14)
    # only the (0, 0) entry carries parameter dependence
    for k in range(1, len(dyn.a_coeffs)):
        a_k = dyn.a_coeffs[k]
        assert np.abs(a_k[0, 1:]).max() <= 1e-14
        assert np.abs(a_k[1, :]).max() <= 1e-14
    for b_k in dyn.b_coeffs[1:]:
        assert np.abs(b_k).max() <= 1e-14
    assert np.allclose(dyn.b_coeffs[0], [[-0.005], [-0.002]], rtol=1e-14)


def lifted_to_function(basis, lifted):
    """Map a lifted coefficient vector to the function theta -> x(theta)."""
    p1 = basis.n_terms
    coeffs = np.asarray(lifted, dtype=float).reshape(-1, p1)

    def x_of_theta(thetas):
        return basis.eval_terms(thetas) @ coeffs.T

    return x_of_theta


def test_one_step_galerkin_matches_projection():
    # the lifted map must equal exact projection of A(theta) x(theta) +
    # B(theta) u(theta) onto the basis, for coefficient states of full degree
    entries_a = [
        [[((0,), 0.5), ((1,), 0.2)], [((0,), 0.1)]],
        [[], [((1,), -0.3)]],
    ]
    entries_b = [[[((1,), 1.0)]], [[((0,), 0.7)]]]
    a = PolynomialMatrix.from_entries(entries_a, n_params=1)
    b = PolynomialMatrix.from_entries(entries_b, n_params=1)
    system = make_system(a, b, (UNI,))
    basis = build_basis((UNI,), 3)
    dyn = project_system(system, basis)
    p1 = basis.n_terms

    rng = np.random.default_rng(9)
    phi = rng.standard_normal(dyn.n)
    u_lift = rng.standard_normal(dyn.r)
    phi_next = dyn.big_a @ phi + dyn.big_b @ u_lift

    x_fun = lifted_to_function(basis, phi)
    u_fun = lifted_to_function(basis, u_lift)
    for i in range(2):
        def row(thetas, i=i):
            vals_a = a.eval_batch(thetas)
            vals_b = b.eval_batch(thetas)
            x = x_fun(thetas)
            u = u_fun(thetas)
            return (
                np.einsum("sj,sj->s", vals_a[:, i, :], x)
                + np.einsum("sj,sj->s", vals_b[:, i, :], u)
            )

        expected = project_function(basis, row)
        assert np.allclose(phi_next[i * p1 : (i + 1) * p1], expected, atol=1e-10)


def test_lifted_dynamics_match_sampled_system_in_moments():
    # mean and covariance of A(theta) x(theta) agree with brute-force draws
    a = PolynomialMatrix.from_entries(
        [[[((0,), 0.6), ((1,), 0.3)]]], n_params=1
    )
    b = PolynomialMatrix.constant([[0.0]], 1)
    system = make_system(a, b, (UNI,))
    basis = build_basis((UNI,), 4)
    dyn = project_system(system, basis)

    rng = np.random.default_rng(21)
    phi = rng.standard_normal(dyn.n)
    phi_next = dyn.big_a @ phi

    thetas = rng.uniform(-1.0, 1.0, size=(400_000, 1))
    x = lifted_to_function(basis, phi)(thetas)[:, 0]
    nxt = a.eval_batch(thetas)[:, 0, 0] * x
    mean_gpc = phi_next[0]
    var_gpc = float((phi_next[1:] ** 2 * basis.norms[1:]).sum())
    se = nxt.std() / np.sqrt(nxt.size)
    assert abs(nxt.mean() - mean_gpc) <= 4.0 * se
    # degree-4 basis truncates the degree-5 product tail; tolerance covers it
    assert nxt.var() == pytest.approx(var_gpc, rel=0.02)


# ---------------------------------------------------------------------------
# lifting helpers


def test_lift_state_layout():
    basis = build_basis((UNI,), 2)
    lifted = lift_state(np.array([2.0, 3.0]), basis)
    assert np.array_equal(lifted, [2.0, 0.0, 0.0, 3.0, 0.0, 0.0])


def test_lift_policy_blocks():
    basis = build_basis((UNI,), 1)
    policy = Policy(
        gains=(np.array([[1.0, -2.0]]),), offsets=(np.array([0.5]),)
    )
    lifted = lift_policy(policy, basis)
    assert np.allclose(lifted.big_gains[0], np.kron([[1.0, -2.0]], np.eye(2)))
    assert np.allclose(lifted.big_offsets[0], [0.5, 0.0])
    assert len(lifted) == 1


# ---------------------------------------------------------------------------
# error paths


def test_degree_overflow_raises():
    a = PolynomialMatrix.from_entries([[[((2,), 1.0)]]], n_params=1)
    b = PolynomialMatrix.constant([[1.0]], 1)
    system = make_system(a, b, (UNI,))
    basis = build_basis((UNI,), 1)
    with pytest.raises(DegreeOverflowError):
        project_system(system, basis)


def test_point_mass_dimension_bypasses_degree_check():
    point = MarginalDistribution.uniform(0.7, 0.7)
    a = PolynomialMatrix.from_entries([[[((2,), 1.0)]]], n_params=1)
    b = PolynomialMatrix.constant([[1.0]], 1)
    system = make_system(a, b, (point,))
    basis = build_basis((point,), 0)
    dyn = project_system(system, basis)
    assert dyn.big_a.shape == (1, 1)
    assert dyn.big_a[0, 0] == pytest.approx(0.49, rel=1e-12)


def test_project_system_requires_matching_marginals():
    a = PolynomialMatrix.constant([[0.5]], 1)
    b = PolynomialMatrix.constant([[1.0]], 1)
    system = make_system(a, b, (UNI,))
    other = build_basis((MarginalDistribution.uniform(0.0, 1.0),), 2)
    with pytest.raises(ParameterError):
        project_system(system, other)


def test_system_validation():
    rect = PolynomialMatrix.constant([[1.0, 0.0]], 1)
    square = PolynomialMatrix.constant([[1.0]], 1)
    with pytest.raises(ParameterError):
        UncertainLinearSystem(rect, square, np.eye(1), np.zeros((1, 1)), (UNI,))
    bad_cov = np.array([[0.0, 1.0], [0.0, 0.0]])
    a2 = PolynomialMatrix.constant(np.eye(2) * 0.5, 1)
    b2 = PolynomialMatrix.constant(np.ones((2, 1)), 1)
    with pytest.raises(ParameterError):
        UncertainLinearSystem(a2, b2, np.eye(2), bad_cov, (UNI,))
    indefinite = np.array([[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(ParameterError):
        UncertainLinearSystem(a2, b2, np.eye(2), indefinite, (UNI,))


def test_noise_gain_recovered_from_lifted_injection():
    gain = np.array([[1.0, 0.0], [0.5, 2.0]])
    a = PolynomialMatrix.constant(np.eye(2) * 0.5, 1)
    b = PolynomialMatrix.constant(np.ones((2, 1)), 1)
    system = make_system(a, b, (UNI,), noise_cov=np.eye(2) * 0.01, noise_gain=gain)
    basis = build_basis((UNI,), 2)
    dyn = project_system(system, basis)
    assert np.allclose(dyn.noise_gain, gain)
    assert np.allclose(
        dyn.lifted_noise_cov, dyn.big_f @ (np.eye(2) * 0.01) @ dyn.big_f.T
    )
