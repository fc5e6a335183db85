"""Acceptance criteria; each test prints one PASS/FAIL line and asserts its verdict."""

import csv
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from labelflow.ensemble import wasserstein1
from labelflow.harness import (bundled_path, convergence_study, export_report, load_scenario, residual_study,
                               run_scenario, sample_initial)
from labelflow.label_geometry import (bl_norm, discrete_space, hellinger, spherical_hellinger, tv_norm)
from labelflow.markov_geometry import (MarkovGeometry, geodesic_distance, metric_tensor, onsager_matrix,
                                       stationary_distribution)
from labelflow.markov_prox import prox_markov_full, prox_markov_surrogate
from labelflow.replicator_prox import prox_hs_batch
from oracles import bl_discrete, hs_objective_oracle, hs_prox_grid, two_state_geodesic_quad

TAU_LADDER = [0.1, 0.05, 0.025, 0.0125]


def fmt(values):
    return "[" + ", ".join(f"{v:.2e}" for v in values) + "]"


def log_slope(x, y):
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


@pytest.fixture(scope="module")
def crowd_study():
    sc = load_scenario(bundled_path("replicator_crowd"))
    start = time.perf_counter()
    report = convergence_study(sc, [16, 32, 64, 128])
    return sc, report, time.perf_counter() - start


def test_metric_chain(acceptance):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = np.inf
    route_gap = 0.0
    for n in range(2, 7):
        space = discrete_space(n)
        a = rng.dirichlet(np.ones(n), size=1000)
        b = rng.dirichlet(np.ones(n), size=1000)
        bl = space.bl_norms(a - b)
        tv = np.array([tv_norm(m) for m in a - b])
        H = hellinger(a, b)
        HS = spherical_hellinger(a, b)
        worst = min(worst, (tv - bl).min(), (2 * H - tv).min(), (2 * HS - 2 * H).min())
        # second, independent BL route on a subset
        for m in (a - b)[:40]:
            route_gap = max(route_gap, abs(bl_norm(m, space) - bl_discrete(m)))
    elapsed = time.perf_counter() - start
    passed = worst >= -1e-9 and route_gap <= 1e-9 and elapsed < 10
    acceptance(1, passed, f"bl <= tv <= 2H <= 2HS, worst slack {worst:.2e}, LP vs oracle {route_gap:.1e}, "
                          f"{elapsed:.1f}s")
    assert passed


def test_exact_oracle_convergence(acceptance):
    sc = load_scenario(bundled_path("markov_single"))
    start = time.perf_counter()
    report = convergence_study(sc, [16, 32, 64, 128, 256], mode="explicit", oracle=True)
    elapsed = time.perf_counter() - start
    at_T = np.array([gaps[-1] for gaps in report.details["snapshot_gaps"]])
    taus = [r.tau for r in report.rows]
    slope = log_slope(taus, at_T)
    passed = abs(slope - 1.0) <= 0.2 and at_T[-1] <= 1e-2 and elapsed < 5 and report.aborted is None
    acceptance(2, passed, f"oracle error slope {slope:.3f}, error at k=256 {at_T[-1]:.2e}, {elapsed:.1f}s")
    assert passed


def test_cauchy_convergence(crowd_study, acceptance):
    _, report, elapsed = crowd_study
    gaps = report.column("w1_gap")
    slope = report.slope()
    monotone = bool(np.all(np.diff(gaps) < 0))
    passed = monotone and slope is not None and slope >= 0.8 and elapsed < 300
    acceptance(3, passed, f"Cauchy gaps {fmt(gaps)}, slope {slope:.3f}, {elapsed:.1f}s")
    assert passed


def test_weak_residual(acceptance):
    sc = load_scenario(bundled_path("replicator_crowd"))
    start = time.perf_counter()
    report = residual_study(sc, [16, 32, 64, 128])
    elapsed = time.perf_counter() - start
    slope = report.slope("residual_max")
    ci = report.slopes["residual_max"]
    passed = slope is not None and abs(slope - 1.0) <= 0.3 and elapsed < 300
    acceptance(4, passed, f"weak residual slope {slope:.3f} (95% CI {ci['ci_low']:.2f}..{ci['ci_high']:.2f}), "
                          f"{elapsed:.1f}s")
    assert passed


def test_hellinger_prox_against_grid(acceptance):
    rng = np.random.default_rng(5)
    start = time.perf_counter()
    worst = 0.0
    for i in range(100):
        n = 2 if i < 50 else 3
        lam_hat = rng.dirichlet(np.ones(n))
        tau = float(10 ** rng.uniform(-2, 0.5))
        payoff = rng.normal(scale=2.0, size=n)
        lam, _, _, _ = prox_hs_batch(lam_hat[None], payoff[None], tau)
        ours = hs_objective_oracle(lam[0], lam_hat, payoff, tau)
        worst = max(worst, abs(ours - hs_prox_grid(lam_hat, payoff, tau)))
    elapsed = time.perf_counter() - start
    passed = worst <= 1e-8 and elapsed < 120
    acceptance(5, passed, f"100 instances, max |objective - grid oracle| {worst:.1e}, {elapsed:.1f}s")
    assert passed


def test_hellinger_euler_lagrange_residual(acceptance):
    sc = load_scenario(bundled_path("replicator_crowd"))
    start = time.perf_counter()
    report = residual_study(sc, [16, 32, 64, 128, 256], mode="prox-hellinger")
    elapsed = time.perf_counter() - start
    slope = report.slope("residual_max")
    vals = report.column("residual_max")
    passed = slope is not None and slope >= 0.9 and elapsed < 300
    acceptance(6, passed, f"EL residual max {fmt(vals)}, slope {slope:.3f}, "
                          f"{elapsed:.1f}s")
    assert passed


def test_explicit_implicit_consistency(crowd_study, acceptance):
    sc, report, _ = crowd_study
    initial = sample_initial(sc, sc.seed)
    a = run_scenario(sc, 128, mode="explicit", initial=initial)
    b = run_scenario(sc, 128, mode="prox-hellinger", initial=initial)
    gap = max(wasserstein1(a.at(t), b.at(t)) for t in sc.snapshots)
    cauchy = report.rows[-1].w1_gap
    passed = gap <= 2 * cauchy
    acceptance(7, passed, f"explicit/implicit gap {gap:.2e} vs 2x Cauchy gap {2 * cauchy:.2e} at k=128")
    assert passed


def test_markov_geometry_examples(acceptance):
    start = time.perf_counter()
    Q2 = np.array([[-1.0, 2.0], [1.0, -2.0]])
    Q3 = np.array([[-1.0, 2.0, 0.0], [1.0, -3.0, 2.0], [0.0, 1.0, -2.0]])
    sym = np.array([[-2.0, 1.0, 1.0], [1.0, -2.0, 1.0], [1.0, 1.0, -2.0]])
    g = MarkovGeometry(Q2)
    w = 2.0 * (1 / 3)
    e = np.array([1.0, -1.0]) / np.sqrt(2)
    errors = [
        np.abs(stationary_distribution(sym) - 1 / 3).max(),
        np.abs(stationary_distribution(Q2) - [2 / 3, 1 / 3]).max(),
        np.abs(stationary_distribution(Q3) - np.array([4, 2, 1]) / 7).max(),
        np.abs(onsager_matrix(g.sigma, g) - w * np.array([[1, -1], [-1, 1]])).max(),
        np.abs(onsager_matrix([1.0, 0.0], g)).max(),
        abs(e @ metric_tensor(g.sigma, g) @ e - 1 / (2 * w)),
    ]
    rng = np.random.default_rng(12)
    worst_rel = 0.0
    for _ in range(20):
        s1, s2 = rng.uniform(0.05, 0.95, size=2)
        ref = two_state_geodesic_quad(s1, s2, Q2)
        length = geodesic_distance([s1, 1 - s1], [s2, 1 - s2], g).length
        worst_rel = max(worst_rel, abs(length - ref) / ref)
    elapsed = time.perf_counter() - start
    passed = max(errors) <= 1e-10 and worst_rel <= 1e-6 and elapsed < 120
    acceptance(8, passed, f"sigma/K/G examples max error {max(errors):.1e}, geodesic vs quadrature "
                          f"max rel {worst_rel:.1e}, {elapsed:.1f}s")
    assert passed


def test_markov_prox_residual(acceptance):
    sc = load_scenario(bundled_path("markov_clouds"))
    report = residual_study(sc, [10, 20, 40, 80])
    taus = [r.tau for r in report.rows]
    slope = report.slope("residual_max")
    excluded = report.details["excluded_fraction"]
    passed = taus == TAU_LADDER and slope is not None and slope >= 0.25 and excluded <= 0.10
    acceptance(9, passed, f"Markov EL residual slope {slope:.3f}, {100 * excluded:.1f}% steps excluded")
    assert passed


def test_surrogate_gap(acceptance):
    sc = load_scenario(bundled_path("markov_clouds"))
    labels = sample_initial(sc, sc.seed).labels
    geom = MarkovGeometry(np.array(sc.dynamics["params"]["Q"]))
    start = time.perf_counter()
    gaps = []
    for tau in TAU_LADDER:
        worst = 0.0
        for lam_hat in labels:
            full = prox_markov_full(lam_hat, geom, tau).lambda_new
            mu = prox_markov_surrogate(lam_hat, full, geom, tau).lambda_new
            worst = max(worst, float(np.linalg.norm(mu - full)))
        gaps.append(worst)
    elapsed = time.perf_counter() - start
    slope = log_slope(TAU_LADDER, gaps)
    passed = slope >= 1.2 and elapsed < 120
    acceptance(10, passed, f"surrogate/full gap {fmt(gaps)}, "
                           f"slope {slope:.3f}, {elapsed:.1f}s")
    assert passed


def test_short_time_stability(acceptance):
    sc = load_scenario(bundled_path("markov_margin"))
    assert (sc.eta, sc.delta) == (0.1, 0.01)
    initial = sample_initial(sc, sc.seed)
    T_f = []
    for k in [16, 32, 64, 128, 256]:
        traj = run_scenario(sc, k, initial=initial)
        T_f.append(traj.log["T_f"])
    T_f = np.array(T_f)
    variation = (T_f.max() - T_f.min()) / T_f.max()
    passed = T_f.min() > 0 and variation < 0.2
    acceptance(11, passed, f"empirical T_f {T_f.tolist()}, relative spread {100 * variation:.1f}%")
    assert passed


def test_pinned_determinism(tmp_path, acceptance):
    sc = load_scenario(bundled_path("replicator_crowd"))
    paths = [tmp_path / "first.csv", tmp_path / "second.csv"]
    for p in paths:
        with threadpool_limits(limits=1):
            export_report(convergence_study(sc, [16, 32, 64, 128], pinned=True), "csv", p)
    same = paths[0].read_bytes() == paths[1].read_bytes()
    rows = len(list(csv.reader(paths[0].open()))) - 1
    passed = same and rows == 4
    acceptance(12, passed, f"pinned CSV reports byte-identical: {same} ({rows} rows)")
    assert passed
