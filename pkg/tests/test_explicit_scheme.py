import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from labelflow.ensemble import EmpiricalMeasure, support_radius, wasserstein1
from labelflow.errors import ContractViolation, SchemeAbort, SimplexViolation
from labelflow.explicit_scheme import (SchemeConfig, equicontinuity_constant, gronwall_radius,
                                       intermediate_measure, label_step_explicit, position_step, residual_dictionary,
                                       run_explicit, step_size_guard, weak_residual)
from labelflow.fields import (MarkovOperator, ReplicatorOperator, builtin_velocity, constant_kernel, constant_rates,
                              local_game, zero_operator)
from labelflow.label_geometry import discrete_space
from oracles import bl_discrete, w1_bruteforce

Q2 = np.array([[-1.0, 2.0], [1.0, -2.0]])
ZERO_V = builtin_velocity("zero")


def single(x, lam):
    return EmpiricalMeasure([np.atleast_1d(x)], [lam])


def crowd_run(k, *, T=1.0, seed=3, N=12):
    rng = np.random.default_rng(seed)
    psi = EmpiricalMeasure(rng.uniform(-1, 1, size=(N, 1)), 0.1 + 0.8 * rng.dirichlet([2, 2], size=N))
    v = builtin_velocity("per_label_drift", drifts=[[1.0], [-1.0]]) + builtin_velocity("mean_field_attraction")
    op = ReplicatorOperator(local_game([[1.0, 0.0], [0.0, 2.0]], 0.5))
    return run_explicit(psi, v, op, SchemeConfig(T, k), guard=False)


def test_config_validation():
    assert SchemeConfig(2.0, 8).tau == 0.25
    for bad in [dict(T_final=0.0, k=4), dict(T_final=1.0, k=0), dict(T_final=1.0, k=2.5),
                dict(T_final=1.0, k=4, label_mode="rk4"), dict(T_final=1.0, k=4, snapshot_times=(0.5, 0.2))]:
        with pytest.raises(ContractViolation):
            SchemeConfig(**bad)


# --- single steps

def test_label_step_examples():
    psi = single(0.0, [1.0, 0.0])
    assert np.allclose(label_step_explicit(psi, zero_operator(), 0.1), [[1.0, 0.0]])
    assert np.allclose(label_step_explicit(psi, MarkovOperator(constant_rates(Q2)), 0.1), [[0.9, 0.1]], atol=1e-15)
    vertex = single(0.0, [0.0, 1.0])
    op = ReplicatorOperator(local_game([[1.0, 3.0], [0.0, 2.0]]))
    assert np.allclose(label_step_explicit(vertex, op, 0.3), [[0.0, 1.0]])


def test_label_step_leaving_simplex_names_agent():
    psi = EmpiricalMeasure([[0.0], [1.0]], [[2 / 3, 1 / 3], [1.0, 0.0]])
    with pytest.raises(SimplexViolation) as info:
        label_step_explicit(psi, MarkovOperator(constant_rates(Q2)), 1.5, step=4)
    assert info.value.agent == 1
    assert "smaller tau" in str(info.value)


def test_step_size_guard_examples():
    assert step_size_guard(zero_operator(), 5.0, 100.0, samples=200)
    assert step_size_guard(ReplicatorOperator(constant_kernel(2.0)), 5.0, 100.0, samples=200)
    markov = MarkovOperator(constant_rates(Q2))
    assert step_size_guard(markov, 3.0, 0.49, samples=3000)
    assert not step_size_guard(markov, 3.0, 0.55, samples=3000)


def test_intermediate_measure_examples():
    psi = single(0.3, [0.5, 0.5])
    same = intermediate_measure(psi, psi.labels)
    assert np.array_equal(same.labels, psi.labels) and np.array_equal(same.positions, psi.positions)
    moved = intermediate_measure(psi, [[0.9, 0.1]])
    assert np.allclose(moved.labels, [[0.9, 0.1]]) and np.array_equal(moved.positions, psi.positions)
    with pytest.raises(ContractViolation):
        intermediate_measure(psi, [[0.9, 0.1], [0.5, 0.5]])


@settings(max_examples=25)
@given(st.integers(0, 10_000))
def test_intermediate_measure_diagonal_coupling_bound(seed):
    rng = np.random.default_rng(seed)
    N = 4
    X = rng.normal(size=(N, 1))
    L = rng.dirichlet(np.ones(3), size=N)
    L2 = rng.dirichlet(np.ones(3), size=N)
    psi = EmpiricalMeasure(X, L)
    tilde = intermediate_measure(psi, L2)
    exact = w1_bruteforce(X, L, X, L2, bl_discrete)
    assert wasserstein1(psi, tilde) == pytest.approx(exact, abs=1e-9)
    assert exact <= max(bl_discrete(L2[a] - L[a]) for a in range(N)) + 1e-9


def test_position_step_examples():
    psi = single(0.0, [0.5, 0.5])
    new = np.array([[0.9, 0.1]])
    tilde = intermediate_measure(psi, new)
    assert np.array_equal(position_step(psi, tilde, new, ZERO_V, 0.1), psi.positions)
    const = builtin_velocity("constant", v=[2.0])
    assert np.allclose(position_step(psi, tilde, new, const, 0.1), [[0.2]])
    drift = builtin_velocity("per_label_drift", drifts=[[1.0], [-1.0]])
    assert position_step(psi, tilde, new, drift, 0.1)[0, 0] == pytest.approx(0.08)


def test_position_step_uses_intermediate_crowd():
    psi = EmpiricalMeasure([[0.0], [1.0]], [[1.0, 0.0], [1.0, 0.0]])
    new = np.array([[0.0, 1.0], [0.0, 1.0]])
    tilde = intermediate_measure(psi, new)
    v = builtin_velocity("mean_field_attraction", kappa=1.0)
    assert np.allclose(position_step(psi, tilde, new, v, 0.5), [[0.25], [0.75]])


# --- whole runs

def test_static_run_is_constant():
    psi = EmpiricalMeasure([[0.1, 0.2], [-1.0, 0.5]], [[0.2, 0.3, 0.5], [1.0, 0.0, 0.0]])
    traj = run_explicit(psi, ZERO_V, zero_operator(), SchemeConfig(2.0, 7))
    for t in np.linspace(0, 2, 13):
        m = traj.at(t)
        assert np.array_equal(m.positions, psi.positions) and np.array_equal(m.labels, psi.labels)


@pytest.mark.parametrize("k", [1, 3, 10, 64])
def test_constant_velocity_is_integrated_exactly(k):
    psi = single([0.5, -1.0], [0.3, 0.7])
    traj = run_explicit(psi, builtin_velocity("constant", v=[1.5, -0.25]), zero_operator(), SchemeConfig(2.0, k))
    assert np.allclose(traj.final.positions, [[3.5, -1.5]], atol=1e-13)
    assert np.allclose(traj.at(0.7).positions, [[1.55, -1.175]], atol=1e-13)


def test_markov_run_converges_to_matrix_exponential():
    lam0 = np.array([0.9, 0.1])
    exact = expm(1.5 * Q2) @ lam0
    errors = []
    for k in [16, 32, 64, 128]:
        traj = run_explicit(single(0.0, lam0), ZERO_V, MarkovOperator(constant_rates(Q2)), SchemeConfig(1.5, k))
        errors.append(np.abs(traj.final.labels[0] - exact).sum())
    slope = -np.polyfit(np.log([16, 32, 64, 128]), np.log(errors), 1)[0]
    assert all(b < a for a, b in zip(errors, errors[1:]))
    assert 0.9 <= slope <= 1.1


def test_guard_aborts_before_stepping():
    with pytest.raises(SchemeAbort) as info:
        run_explicit(single(0.0, [0.5, 0.5]), ZERO_V, MarkovOperator(constant_rates(Q2)), SchemeConfig(4.0, 4),
                     guard_samples=2000)
    assert info.value.step == 0


def test_mass_and_support_bound_along_a_run():
    traj = crowd_run(32)
    assert np.allclose(traj.labels.sum(axis=2), 1.0, atol=1e-12)
    assert traj.labels.min() >= 0.0
    v = builtin_velocity("per_label_drift", drifts=[[1.0], [-1.0]]) + builtin_velocity("mean_field_attraction")
    R = gronwall_radius(support_radius(traj.measure(0)), v.growth_M_v, 1.0)
    assert max(support_radius(traj.measure(i)) for i in range(traj.steps + 1)) <= R


def test_time_equicontinuity_within_a_step():
    traj = crowd_run(16)
    v = builtin_velocity("per_label_drift", drifts=[[1.0], [-1.0]]) + builtin_velocity("mean_field_attraction")
    op = ReplicatorOperator(local_game([[1.0, 0.0], [0.0, 2.0]], 0.5))
    R = gronwall_radius(support_radius(traj.measure(0)), v.growth_M_v, 1.0)
    L = equicontinuity_constant(v.growth_M_v, op.growth_M_T, R)
    for i in [0, 5, 15]:
        s, t = i * traj.tau + 0.1 * traj.tau, i * traj.tau + 0.8 * traj.tau
        assert wasserstein1(traj.at(s), traj.at(t)) <= L * (t - s)


def test_cauchy_gaps_decrease():
    runs = {k: crowd_run(k) for k in [8, 16, 32, 64]}
    times = np.linspace(0, 1, 6)
    gaps = [max(wasserstein1(runs[k].at(t), runs[2 * k].at(t)) for t in times) for k in [8, 16, 32]]
    assert gaps[0] > gaps[1] > gaps[2]


# --- weak residual

def test_weak_residual_static_is_zero():
    psi = EmpiricalMeasure([[0.3]], [[0.4, 0.6]])
    traj = run_explicit(psi, ZERO_V, zero_operator(), SchemeConfig(1.0, 8))
    for phi in residual_dictionary(1, 2):
        assert abs(weak_residual(traj, phi, 0.3)) <= 1e-15


def test_weak_residual_rejects_nodes():
    traj = run_explicit(single(0.0, [0.5, 0.5]), ZERO_V, zero_operator(), SchemeConfig(1.0, 4))
    for t in [0.0, 0.25, 1.0, 1.3]:
        with pytest.raises(ContractViolation):
            weak_residual(traj, residual_dictionary(1, 2)[0], t)


def test_weak_residual_decays_linearly_for_linear_observable():
    lam_first = [phi for phi in residual_dictionary(1, 2) if phi.name == "lam0"][0]
    ks = [16, 32, 64, 128, 256]
    vals = []
    for k in ks:
        traj = crowd_run(k)
        t = (np.sqrt(2) - 1 + 0.5 * k) / k  # inside a step, away from nodes
        vals.append(abs(weak_residual(traj, lam_first, t)))
    slope = -np.polyfit(np.log(ks), np.log(vals), 1)[0]
    assert slope >= 0.8


def test_dictionary_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    X, L = rng.normal(size=(3, 2)), rng.dirichlet(np.ones(3), size=3)
    eps = 1e-6
    for phi in residual_dictionary(2, 3, bump_center=[0.2, -0.1], bump_width=0.7):
        gx = np.stack([(phi.value(X + eps * e, L) - phi.value(X - eps * e, L)) / (2 * eps) for e in np.eye(2)], 1)
        gl = np.stack([(phi.value(X, L + eps * e) - phi.value(X, L - eps * e)) / (2 * eps) for e in np.eye(3)], 1)
        assert np.allclose(phi.grad_x(X, L), gx, atol=1e-8)
        assert np.allclose(phi.grad_lam(X, L), gl, atol=1e-8)
