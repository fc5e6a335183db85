"""Implicit Markov label step: minimizing movement of the relative entropy.

The full step minimizes ``E(lam) + d(lam, lam_hat)^2 / (2 tau)`` with ``d``
the geodesic distance of the Onsager metric. For two labels the problem is
one-dimensional and is solved exactly by root finding in arc length; for
more labels the production step is the surrogate where ``d^2`` is replaced
by the frozen quadratic form ``|lam - lam_hat|^2_{G(lam_ref)}``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .errors import (ContractViolation, InvalidLabelError, NearSingularMetricError,
                     NonUniqueStationaryError, NotReversibleError, ProxNonConvergence)
from .explicit_scheme import run_scheme
from .fields import MarkovOperator, RateMatrixField, constant_rates
from .label_geometry import discrete_space
from .markov_geometry import (BOUNDARY_TOL, MarkovGeometry, _optimize_path, entropy, entropy_gradient,
                              log_mean, metric_tensor, path_length, probe_constants, zero_sum_basis)
from .replicator_prox import ProxResult

DEFAULT_DELTA = 0.01
DEFAULT_ETA = 0.1
BISECTION_STEPS = 200
NEWTON_STEPS = 100
NESTED_SEGMENTS = 16


@dataclass
class MarginMonitor:
    """Stops a run as soon as a label component drops below ``delta``.

    ``eta`` is the margin required of the initial labels.
    ``violated_at`` records ``(step, agent)`` of the first violation.
    """

    delta: float = DEFAULT_DELTA
    eta: float = DEFAULT_ETA
    violated_at: tuple | None = None

    def __post_init__(self):
        if not (self.eta > self.delta > 0):
            raise ContractViolation(f"margins need eta > delta > 0, got eta={self.eta}, delta={self.delta}")

    def reset(self):
        self.violated_at = None

    def check(self, step, labels):
        """True when every agent keeps ``min_h lam_h >= delta``."""
        low = np.min(labels, axis=1)
        bad = np.flatnonzero(low < self.delta)
        if bad.size:
            self.violated_at = (int(step), int(bad[0]))
            return False
        return True


# --------------------------------------------------------------------------- batched chain data


def batch_stationary(Q):
    """Stationary laws of a stack of rate matrices, shape ``(N, n)``.

    Raises
    ------
    NonUniqueStationaryError
        If some chain is reducible.
    NotReversibleError
        If detailed balance fails beyond 1e-8.
    """
    Q = np.asarray(Q, dtype=float)
    N, n, _ = Q.shape
    A = Q.copy()
    A[:, -1, :] = 1.0
    rhs = np.zeros((N, n))
    rhs[:, -1] = 1.0
    try:
        sigma = np.linalg.solve(A, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        raise NonUniqueStationaryError("a rate matrix has no unique stationary law") from None
    if not np.all(np.isfinite(sigma)) or np.any(np.abs(np.einsum("aij,aj->ai", Q, sigma)).max(axis=1)
                                                 > 1e-8 * np.maximum(1.0, np.abs(Q).max(axis=(1, 2)))):
        raise NonUniqueStationaryError("a rate matrix has no unique stationary law")
    if np.any(sigma <= BOUNDARY_TOL):
        raise NearSingularMetricError("a stationary law touches the simplex boundary")
    flux = Q * sigma[:, None, :]
    if np.abs(flux - np.swapaxes(flux, 1, 2)).max() > 1e-8:
        raise NotReversibleError("a rate matrix violates detailed balance")
    return sigma


def batch_metric(lam, Q, sigma):
    """Metric tensors ``G`` for per-agent chains, shape ``(N, n, n)``."""
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= BOUNDARY_TOL):
        raise NearSingularMetricError(f"metric requested at a near-boundary point (min component {lam.min():.3e})")
    N, n = lam.shape
    rho = lam / sigma
    K = np.zeros((N, n, n))
    for h in range(n):
        for l in range(h + 1, n):
            c = Q[:, h, l] * sigma[:, l] * log_mean(rho[:, h], rho[:, l])
            K[:, h, h] += c
            K[:, l, l] += c
            K[:, h, l] -= c
            K[:, l, h] -= c
    B = zero_sum_basis(n)
    return B @ np.linalg.inv(B.T @ K @ B) @ B.T


# --------------------------------------------------------------------------- two labels, exact


def _two_state_arc(a, b, sigma1, weight):
    """Signed arc length from ``a`` to ``b`` along ``(s, 1 - s)``, vectorized over agents."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    room = 0.5 * np.minimum(lo, 1.0 - hi)
    if np.any(room <= 0):
        raise NearSingularMetricError("two-state arc needs interior endpoints")
    panels = int(min(np.max(np.ceil((hi - lo) / room)), 4096)) if lo.size else 1
    panels = max(panels, 1)
    x, w = _GL
    edges = lo[:, None] + (hi - lo)[:, None] * np.linspace(0.0, 1.0, panels + 1)[None, :]
    left, right = edges[:, :-1, None], edges[:, 1:, None]
    pts = 0.5 * (right - left) * x + 0.5 * (right + left)
    s1 = sigma1[:, None, None]
    speed = 1.0 / np.sqrt(weight[:, None, None] * log_mean(pts / s1, (1.0 - pts) / (1.0 - s1)))
    total = np.sum(0.5 * (right - left) * w * speed, axis=(1, 2))
    return np.where(b >= a, total, -total)


_GL = np.polynomial.legendre.leggauss(20)


def _two_state_speed(s, sigma1, weight):
    return 1.0 / np.sqrt(weight * log_mean(s / sigma1, (1.0 - s) / (1.0 - sigma1)))


def prox_two_state_batch(s_hat, sigma1, weight, tau):
    """Exact two-label minimizing movement for many agents.

    Parameters
    ----------
    s_hat : ndarray, shape (N,)
        First label component of every agent.
    sigma1 : ndarray, shape (N,)
        First component of every agent's stationary law.
    weight : ndarray, shape (N,)
        Edge weight ``Q[0, 1] sigma_2``.
    tau : float

    Returns
    -------
    s_new, objective, slope, iterations
        ``slope`` is the derivative of the objective at ``s_new``.
    """
    s_hat = np.asarray(s_hat, dtype=float)
    sigma1 = np.asarray(sigma1, dtype=float)
    weight = np.asarray(weight, dtype=float)

    def dE(s):
        return np.log(s / sigma1) - np.log((1.0 - s) / (1.0 - sigma1))

    def slope(s):
        return dE(s) + _two_state_arc(s_hat, s, sigma1, weight) * _two_state_speed(s, sigma1, weight) / tau

    # the minimizer lies between s_hat and sigma1, where the slope changes sign
    lo, hi = np.minimum(s_hat, sigma1), np.maximum(s_hat, sigma1)
    iterations = 0
    for iterations in range(1, BISECTION_STEPS + 1):
        mid = lo + 0.5 * (hi - lo)
        if np.all((mid <= lo) | (mid >= hi)):
            break
        up = slope(mid) > 0
        hi = np.where(up, mid, hi)
        lo = np.where(up, lo, mid)
    s_new = 0.5 * (lo + hi)
    arc = _two_state_arc(s_hat, s_new, sigma1, weight)
    lam = np.stack([s_new, 1.0 - s_new], axis=1)
    sig = np.stack([sigma1, 1.0 - sigma1], axis=1)
    objective = np.sum(lam * np.log(lam / sig), axis=1) + arc * arc / (2.0 * tau)
    return s_new, objective, slope(s_new), iterations


# --------------------------------------------------------------------------- surrogate


def _surrogate_objective(lam, lam_hat, G, sigma, tau):
    diff = lam - lam_hat
    quad = np.einsum("ai,aij,aj->a", diff, G, diff)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.sum(np.where(lam > 0, lam * np.log(lam / sigma), 0.0), axis=1)
    return ent + quad / (2.0 * tau)


def surrogate_batch(lam_hat, G, sigma, tau, *, tol=1e-12):
    """Minimize ``E(lam) + |lam - lam_hat|^2_G / (2 tau)`` row by row.

    Damped Newton on the zero-sum hyperplane, with steps cut back to stay
    inside the simplex (the entropy keeps the minimizer interior).

    Returns
    -------
    lam_new, objective, gradient_norm, iterations
    """
    lam_hat = np.atleast_2d(np.asarray(lam_hat, dtype=float))
    N, n = lam_hat.shape
    B = zero_sum_basis(n)
    lam = lam_hat.copy()
    scale = max(1.0, 1.0 / tau)
    gnorm = np.full(N, np.inf)
    iterations = 0
    for iterations in range(1, NEWTON_STEPS + 1):
        grad = np.log(lam / sigma) + 1.0 + np.einsum("aij,aj->ai", G, lam - lam_hat) / tau
        gz = grad @ B
        gnorm = np.linalg.norm(gz, axis=1)
        active = gnorm > tol * scale
        if not active.any():
            break
        H = B.T @ (np.eye(n)[None] / lam[:, :, None] + G / tau) @ B
        dz = -np.linalg.solve(H, gz[..., None])[..., 0]
        step = dz @ B.T
        with np.errstate(divide="ignore", invalid="ignore"):
            limit = np.where(step < 0, -lam / step, np.inf).min(axis=1)
        t = np.where(active, np.minimum(1.0, 0.99 * limit), 0.0)
        f0 = _surrogate_objective(lam, lam_hat, G, sigma, tau)
        decrease = np.sum(gz * dz, axis=1)
        for _ in range(60):
            trial = lam + t[:, None] * step
            f1 = _surrogate_objective(trial, lam_hat, G, sigma, tau)
            bad = active & (f1 > f0 + 1e-4 * t * decrease + 1e-15 * np.abs(f0))
            if not bad.any():
                break
            t = np.where(bad, 0.5 * t, t)
        lam = lam + t[:, None] * step
        lam = np.clip(lam, 1e-300, None)
        lam /= lam.sum(axis=1, keepdims=True)
    objective = _surrogate_objective(lam, lam_hat, G, sigma, tau)
    return lam, objective, gnorm, iterations


def _as_geometry(geom):
    return geom if isinstance(geom, MarkovGeometry) else MarkovGeometry(geom)


def _interior(lam, what):
    lam = np.asarray(lam, dtype=float)
    if lam.ndim != 1 or np.any(lam <= BOUNDARY_TOL) or abs(lam.sum() - 1.0) > 1e-9:
        raise NearSingularMetricError(f"{what} must be a strictly interior probability vector")
    return lam / lam.sum()


def prox_markov_surrogate(lam_hat, lam_ref, geom, tau):
    """Surrogate step with the metric frozen at ``lam_ref``.

    Returns
    -------
    ProxResult

    Raises
    ------
    NearSingularMetricError
        If ``lam_ref`` is within 1e-12 of the simplex boundary.
    """
    geom = _as_geometry(geom)
    if not tau > 0:
        raise ContractViolation(f"tau must be positive, got {tau}")
    lam_ref = _interior(lam_ref, "lam_ref")
    lam_hat = np.asarray(lam_hat, dtype=float)
    G = metric_tensor(lam_ref, geom)
    lam, obj, gnorm, its = surrogate_batch(lam_hat[None], G[None], geom.sigma[None], tau)
    ok = bool(gnorm[0] <= 1e-10 * max(1.0, 1.0 / tau))
    return ProxResult(lam[0], float(obj[0]), its, ok, float(gnorm[0]))


# --------------------------------------------------------------------------- full step


def _nested_full(lam_hat, geom, tau, segments, start):
    """Outer L-BFGS over the new label, inner polygonal geodesic."""
    B = geom.basis
    cache = {}

    def fun(z):
        lam = lam_hat + B @ z
        if np.any(lam <= 1e-9):
            return 1e6, np.zeros_like(z)
        prev = cache.get("nodes")
        init = None
        if prev is not None:
            t = np.linspace(0.0, 1.0, segments + 1)[:, None]
            init = prev + (1.0 - t) * (lam - prev[0])[None, :]
        nodes, length, _ = _optimize_path(lam, lam_hat, geom, segments, init=init)
        cache["nodes"] = nodes
        _, g = path_length(nodes, geom, with_grad=True)
        value = entropy(lam, geom) + length * length / (2.0 * tau)
        grad = entropy_gradient(lam, geom) + (length / tau) * g[0]
        return value, B.T @ grad

    z0 = B.T @ (start - lam_hat)
    res = minimize(fun, z0, jac=True, method="L-BFGS-B",
                   options={"ftol": 1e-15, "gtol": 1e-10, "maxiter": 500})
    lam = lam_hat + B @ res.x
    return lam / lam.sum(), float(res.fun), int(res.nit), bool(res.success), float(np.linalg.norm(res.jac))


def prox_markov_full(lam_hat, geom, tau, *, segments=NESTED_SEGMENTS):
    """Minimizing movement ``argmin E(lam) + d(lam, lam_hat)^2 / (2 tau)``.

    Two labels are handled exactly (the new label solves a scalar equation
    in arc length). With three or more labels the geodesic is discretized
    with ``segments`` pieces and the outer problem is solved by L-BFGS,
    started from the surrogate step; this path is meant for cross-checks.

    Returns
    -------
    ProxResult
    """
    geom = _as_geometry(geom)
    if not tau > 0:
        raise ContractViolation(f"tau must be positive, got {tau}")
    lam_hat = _interior(lam_hat, "lam_hat")
    if geom.n == 2:
        weight = np.array([geom.Q[0, 1] * geom.sigma[1]])
        s, obj, slope, its = prox_two_state_batch(lam_hat[:1], geom.sigma[:1], weight, tau)
        lam = np.array([s[0], 1.0 - s[0]])
        scale = max(1.0, 1.0 / tau)
        return ProxResult(lam, float(obj[0]), its, bool(abs(slope[0]) <= 1e-6 * scale), float(abs(slope[0])))
    if np.allclose(lam_hat, geom.sigma, rtol=0, atol=1e-15):
        return ProxResult(lam_hat.copy(), entropy(lam_hat, geom), 0, True, 0.0)
    start = prox_markov_surrogate(lam_hat, lam_hat, geom, tau).lambda_new
    lam, obj, its, ok, stat = _nested_full(lam_hat, geom, tau, segments, start)
    return ProxResult(lam, obj, its, ok, stat)


# --------------------------------------------------------------------------- residuals


def el_residual_markov(lam_hat, lam_new, geom, tau):
    """Euclidean norm of ``(lam_new - lam_hat)/tau - Q lam_new``."""
    Q = geom.Q if isinstance(geom, MarkovGeometry) else np.asarray(geom, dtype=float)
    lam_hat = np.asarray(lam_hat, dtype=float)
    lam_new = np.asarray(lam_new, dtype=float)
    return float(np.linalg.norm((lam_new - lam_hat) / tau - Q @ lam_new))


def margin_distance(lam, delta):
    """Distance from ``lam`` to the boundary of the ``delta`` interior, inside the simplex plane."""
    lam = np.asarray(lam, dtype=float)
    n = lam.shape[-1]
    return (np.min(lam, axis=-1) - delta) * np.sqrt(n / (n - 1.0))


def proximity_condition(lam1, lam2, constants):
    """Whether ``sqrt(c3/c1) |lam1 - lam2|`` is below both margin distances.

    ``constants`` is a :class:`GeometryConstants` (its ``delta`` sets the
    interior). Broadcasts over leading axes.
    """
    ratio = np.sqrt(constants.c3 / constants.c1)
    gap = np.linalg.norm(np.asarray(lam1, float) - np.asarray(lam2, float), axis=-1)
    room = np.minimum(margin_distance(lam1, constants.delta), margin_distance(lam2, constants.delta))
    return ratio * gap < room


_CONSTANTS_CACHE = {}


def cached_constants(Q, sigma, delta):
    """Probed geometry constants, memoized on ``(Q, delta)``."""
    key = (np.asarray(Q, dtype=float).tobytes(), float(delta))
    hit = _CONSTANTS_CACHE.get(key)
    if hit is None:
        if len(_CONSTANTS_CACHE) > 256:
            _CONSTANTS_CACHE.clear()
        hit = probe_constants(MarkovGeometry(Q, sigma), delta=delta)
        _CONSTANTS_CACHE[key] = hit
    return hit


# --------------------------------------------------------------------------- scheme


def run_implicit_markov(initial, velocity, rates, config, monitor=None, *, space=None,
                        record_residuals=False, refresh=1):
    """Alternate scheme whose label step is the entropic minimizing movement.

    Two-label runs use the exact step. Otherwise every agent takes the
    surrogate step with the metric frozen at its current label, followed by
    ``refresh`` re-solves with the metric frozen at the latest iterate.
    After every step the margin monitor checks all labels; the first
    violation ends the run at the last valid node.

    Parameters
    ----------
    initial : EmpiricalMeasure
        Every label must have all components ``>= monitor.eta``.
    velocity : VelocityField
    rates : RateMatrixField or array_like
    config : SchemeConfig
    monitor : MarginMonitor, optional
    record_residuals : bool
        Store per-step, per-agent residuals ``el_residuals`` and the
        proximity flags ``proximity_ok`` (both shaped ``(steps, N)``).
    refresh : int

    Returns
    -------
    Trajectory
        ``log["T_f"]`` is the time of the last valid node and
        ``log["margin_violation"]`` the ``(step, agent)`` that ended the run,
        or None.

    Raises
    ------
    InvalidLabelError
        If an initial label lies below the margin ``eta``.
    ProxNonConvergence
        If a step misses its stationarity tolerance.
    """
    if not isinstance(rates, RateMatrixField):
        rates = constant_rates(rates)
    monitor = MarginMonitor() if monitor is None else monitor
    monitor.reset()
    n = initial.n
    if rates.n is not None and rates.n != n:
        raise ContractViolation(f"rate field has n={rates.n} labels, measure has n={n}")
    low = initial.labels.min(axis=1)
    if np.any(low < monitor.eta):
        a = int(np.flatnonzero(low < monitor.eta)[0])
        raise InvalidLabelError(
            f"initial label of agent {a} has a component {low[a]:.4g} below the margin eta={monitor.eta}")
    space = discrete_space(n) if space is None else space
    tau = config.tau
    scale = max(1.0, 1.0 / tau)
    log = {"prox_iterations": [], "margin_min": []}
    if record_residuals:
        log["el_residuals"] = []
        log["proximity_ok"] = []

    def update(i, psi):
        Q = rates.batch(psi.positions, psi)
        sigma = batch_stationary(Q)
        lam_hat = psi.labels
        if n == 2:
            s, _, slope, its = prox_two_state_batch(lam_hat[:, 0], sigma[:, 0], Q[:, 0, 1] * sigma[:, 1], tau)
            bad = np.abs(slope) > 1e-6 * scale
            lam_new = np.stack([s, 1.0 - s], axis=1)
        else:
            lam_new, _, gnorm, its = surrogate_batch(lam_hat, batch_metric(lam_hat, Q, sigma), sigma, tau)
            for _ in range(refresh):
                lam_new, _, gnorm, more = surrogate_batch(lam_hat, batch_metric(lam_new, Q, sigma), sigma, tau)
                its += more
            bad = gnorm > 1e-10 * scale
        if bad.any():
            a = int(np.flatnonzero(bad)[0])
            raise ProxNonConvergence(f"Markov proximal step failed for agent {a} at step {i}", step=i, agent=a)
        log["prox_iterations"].append(its)
        log["margin_min"].append(float(lam_new.min()))
        if record_residuals:
            res = np.linalg.norm((lam_new - lam_hat) / tau - np.einsum("aij,aj->ai", Q, lam_new), axis=1)
            ok = np.array([proximity_condition(lam_hat[a], lam_new[a], cached_constants(Q[a], sigma[a], monitor.delta))
                           for a in range(lam_hat.shape[0])])
            log["el_residuals"].append(res)
            log["proximity_ok"].append(ok)
        return lam_new

    traj = run_scheme(initial, velocity, update, config, operator=MarkovOperator(rates), space=space,
                      monitor=monitor.check, log=log)
    steps = traj.steps
    for key in ("prox_iterations", "margin_min"):
        log[key] = log[key][:steps]
    if record_residuals:
        log["el_residuals"] = np.array(log["el_residuals"][:steps]).reshape(steps, initial.N)
        log["proximity_ok"] = np.array(log["proximity_ok"][:steps], dtype=bool).reshape(steps, initial.N)
    log["T_f"] = steps * tau
    log["margin_violation"] = monitor.violated_at
    return traj
