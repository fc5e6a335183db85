import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from labelflow.ensemble import EmpiricalMeasure, first_moment
from labelflow.errors import ContractViolation, InvalidRateMatrix
from labelflow.fields import (MarkovOperator, PayoffKernel, ReplicatorOperator, birth_death_rates,
                              builtin_kernel, builtin_rates, builtin_velocity, check_rate_matrix,
                              constant_kernel, constant_rates, delta_estimate, identity_kernel, local_game,
                              markov_operator, matrix_game, replicator_operator, sample_states, zero_operator)
from labelflow.label_geometry import discrete_space

Q2 = np.array([[-1.0, 2.0], [1.0, -2.0]])


def crowd(seed=0, N=6, d=1, n=3):
    rng = np.random.default_rng(seed)
    return EmpiricalMeasure(rng.normal(size=(N, d)), rng.dirichlet(np.ones(n), size=N))


# --- replicator operator

def test_replicator_constant_kernel_vanishes():
    psi = crowd()
    out = replicator_operator([0.3], [0.2, 0.5, 0.3], psi, constant_kernel(2.5))
    assert np.allclose(out, 0.0, atol=1e-15)


def test_replicator_vanishes_at_vertices():
    psi = crowd()
    kernel = local_game(np.arange(9.0).reshape(3, 3), 0.7)
    for h in range(3):
        assert np.allclose(replicator_operator([0.1], np.eye(3)[h], psi, kernel), 0.0, atol=1e-15)


def test_replicator_identity_kernel_uniform_opponent():
    psi = EmpiricalMeasure([[0.0]], [[0.5, 0.5]])
    out = replicator_operator([0.0], [0.75, 0.25], psi, identity_kernel())
    assert np.allclose(out, 0.0, atol=1e-15)


def test_replicator_empty_crowd_is_rejected():
    with pytest.raises(ContractViolation):
        replicator_operator([0.0], [0.5, 0.5], None, identity_kernel())


def test_kernel_convolution_matches_direct_double_sum():
    psi = crowd(2, N=5, d=2, n=3)
    A = np.array([[1.0, -2.0, 0.5], [0.0, 1.0, 3.0], [2.0, 2.0, -1.0]])
    fast = local_game(A, 0.8)
    slow = PayoffKernel(fast.eval, fast.growth_M_J)
    X = np.random.default_rng(5).normal(size=(4, 2))
    assert np.allclose(fast.convolve(X, psi), slow.convolve(X, psi), atol=1e-13)
    direct = np.array([[sum(psi.weights[a] * A[h, hp] * np.exp(-0.5 * np.sum((x - psi.positions[a]) ** 2) / 0.64)
                            * psi.labels[a, hp] for a in range(psi.N) for hp in range(3)) for h in range(3)]
                       for x in X])
    assert np.allclose(fast.convolve(X, psi), direct, atol=1e-13)


@given(st.integers(0, 10_000))
def test_operators_are_zero_sum(seed):
    rng = np.random.default_rng(seed)
    psi = crowd(seed)
    lam = rng.dirichlet(np.ones(3))
    kernel = matrix_game(rng.normal(size=(3, 3)))
    assert abs(replicator_operator([0.0], lam, psi, kernel).sum()) <= 1e-10
    Q = rng.uniform(0, 2, size=(3, 3))
    np.fill_diagonal(Q, 0)
    np.fill_diagonal(Q, -Q.sum(axis=0))
    assert abs(markov_operator([0.0], lam, psi, Q).sum()) <= 1e-10


@given(st.integers(0, 10_000))
def test_replicator_sign_structure(seed):
    rng = np.random.default_rng(seed)
    psi = crowd(seed)
    kernel = matrix_game(rng.normal(size=(3, 3)))
    payoff = kernel.convolve(np.zeros((1, 1)), psi)[0]
    lam = rng.dirichlet(np.ones(3))
    out = replicator_operator([0.0], lam, psi, kernel)
    assert out[int(np.argmax(payoff))] >= -1e-15


# --- Markov operator

def test_markov_operator_examples():
    psi = crowd(n=2)
    assert np.allclose(markov_operator([0.0], [1, 0], psi, Q2), [-1, 1])
    assert np.allclose(markov_operator([0.0], [2 / 3, 1 / 3], psi, Q2), 0.0, atol=1e-15)
    assert np.allclose(markov_operator([0.0], [0.4, 0.6], psi, np.zeros((2, 2))), 0.0)
    field = constant_rates(Q2)
    assert np.allclose(markov_operator([0.0], [1, 0], psi, field), [-1, 1])


def test_markov_operator_is_linear():
    psi = crowd(n=2)
    a, b, alpha = np.array([0.2, 0.8]), np.array([0.9, 0.1]), 0.3
    lhs = markov_operator([0.0], alpha * a + (1 - alpha) * b, psi, Q2)
    rhs = alpha * markov_operator([0.0], a, psi, Q2) + (1 - alpha) * markov_operator([0.0], b, psi, Q2)
    assert np.allclose(lhs, rhs, atol=1e-15)


def test_invalid_rate_matrices():
    with pytest.raises(InvalidRateMatrix):
        check_rate_matrix(np.array([[-1.0, 2.0], [1.0, -1.0]]))
    with pytest.raises(InvalidRateMatrix):
        check_rate_matrix(np.array([[1.0, -1.0], [-1.0, 1.0]]))
    with pytest.raises(InvalidRateMatrix):
        markov_operator([0.0], [0.5, 0.5], crowd(n=2), [[-1.0, 0.0], [0.0, 0.0]])


def test_birth_death_field_columns_and_modulation():
    field = birth_death_rates([1.0, 0.5], [2.0, 2.0], modulation=0.5)
    psi = crowd(n=3)
    Q = field.batch(psi.positions, psi)
    assert Q.shape == (psi.N, 3, 3)
    assert np.allclose(Q.sum(axis=1), 0.0, atol=1e-14)
    ahead = np.argmax(psi.positions[:, 0])
    assert Q[ahead, 1, 0] > 1.0
    with pytest.raises(ContractViolation):
        birth_death_rates([1.0], [1.0], modulation=1.0)


# --- velocities

def test_builtin_velocities():
    psi = EmpiricalMeasure([[2.0]], [[1.0, 0.0]])
    assert np.allclose(builtin_velocity("zero").eval([0.3], [0.5, 0.5], psi), 0.0)
    drift = builtin_velocity("per_label_drift", drifts=[[1.0], [-1.0]])
    assert drift.eval([0.0], [0.75, 0.25], psi)[0] == pytest.approx(0.5)
    attract = builtin_velocity("mean_field_attraction", kappa=1.0)
    assert attract.eval([0.0], [0.5, 0.5], psi)[0] == pytest.approx(2.0)
    const = builtin_velocity("constant", v=[0.5, -1.0])
    assert np.allclose(const.eval([0.0, 0.0], [1.0, 0.0], psi), [0.5, -1.0])
    with pytest.raises(ContractViolation):
        builtin_velocity("swirl")
    both = drift + attract
    assert both.eval([0.0], [0.75, 0.25], psi)[0] == pytest.approx(2.5)


def test_registries_reject_unknown_names():
    with pytest.raises(ContractViolation):
        builtin_kernel("nope")
    with pytest.raises(ContractViolation):
        builtin_rates("nope")
    assert builtin_kernel("identity").convolve(np.zeros((1, 1)), EmpiricalMeasure([[0.0]], [[0.5, 0.5]])).shape == (1, 2)


@given(st.integers(0, 10_000))
def test_growth_bounds_hold_on_samples(seed):
    rng = np.random.default_rng(seed)
    X, L, psi = sample_states(rng, 30, 1, 2, R=4.0)
    space = discrete_space(2)
    m1 = first_moment(psi, space)
    norms = np.abs(X[:, 0]) + space.bl_norms(L)
    v = builtin_velocity("per_label_drift", drifts=[[1.0], [-2.0]]) + builtin_velocity("mean_field_attraction")
    V = np.abs(v.batch(X, L, psi)[:, 0])
    assert np.all(V <= v.growth_M_v * (1 + norms + m1) + 1e-12)
    op = ReplicatorOperator(local_game([[1.0, -1.0], [0.5, 2.0]], 0.5))
    T = space.bl_norms(op.batch(X, L, psi))
    assert np.all(T <= op.growth_M_T * (1 + norms + m1) + 1e-12)


# --- positivity margin estimate

def test_delta_estimate_examples():
    assert delta_estimate(zero_operator(), 3.0, samples=500) == 0.0
    assert delta_estimate(ReplicatorOperator(constant_kernel(3.0)), 3.0, samples=500) <= 1e-14
    est = delta_estimate(MarkovOperator(constant_rates(Q2)), 3.0, samples=5000)
    assert 1.9 <= est <= 2.0 + 1e-12


# --- Lipschitz probes: |f(y1, psi1) - f(y2, psi2)| <= L (|y1 - y2| + W1(psi1, psi2))

def _lipschitz_ratios(field_values, norm, scales, seed=0, N=6):
    """Largest difference quotient over random perturbations of each size."""
    from labelflow.ensemble import wasserstein1

    rng = np.random.default_rng(seed)
    space = discrete_space(2)
    out = []
    for eps in scales:
        worst = 0.0
        for _ in range(40):
            X, L, psi = sample_states(rng, 1, 1, 2, R=2.0, crowd_size=N)
            L = 0.05 + 0.9 * L
            dx = eps * rng.normal(size=X.shape)
            dl = eps * rng.normal(size=L.shape[1])
            dl -= dl.mean()
            moved = EmpiricalMeasure(psi.positions + eps * rng.normal(size=psi.positions.shape), psi.labels)
            num = norm(field_values(X, L, psi) - field_values(X + dx, L + dl, moved))
            den = np.abs(dx).sum() + space.bl_norms(dl) + wasserstein1(psi, moved, space)
            worst = max(worst, float(num / den))
        out.append(worst)
    return out


def test_replicator_operator_is_lipschitz_in_the_bl_reading():
    space = discrete_space(2)
    op = ReplicatorOperator(local_game([[1.0, -1.0], [0.5, 2.0]], 0.5))
    ratios = _lipschitz_ratios(op.batch, lambda d: space.bl_norms(d)[0], [1e-2, 1e-3, 1e-4])
    assert max(ratios) < 50
    assert ratios[-1] <= 2 * ratios[0]


def test_velocity_is_lipschitz():
    v = builtin_velocity("per_label_drift", drifts=[[1.0], [-2.0]]) + builtin_velocity("mean_field_attraction")
    ratios = _lipschitz_ratios(v.batch, lambda d: np.abs(d).sum(), [1e-2, 1e-3, 1e-4])
    assert max(ratios) < 50
    assert ratios[-1] <= 2 * ratios[0]
