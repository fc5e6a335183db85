"""Implicit replicator step: a minimizing movement in the spherical Hellinger geometry.

With ``q = sqrt(lam)`` on the unit sphere, the step minimizes

    F(lam) = -1/4 <p, lam> + D(angle(q, q_hat)) / (2 tau)

where ``p = (J*psi)(x, .)`` and ``D(theta) = theta**2`` (geodesic
convention). Stationarity on the sphere forces

    q_h = c q_hat_h / (m - p_h / 2)

for two scalars ``c, m``; normalizing ``q`` leaves a single monotone
equation in ``m`` which is solved by bisection for all agents at once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, ProxNonConvergence
from .explicit_scheme import run_scheme
from .fields import ReplicatorOperator, replicator_batch
from .label_geometry import as_distribution, discrete_space

PIN_TOL = 1e-14
STATIONARITY_TOL = 1e-9
BISECTION_STEPS = 200
CONVENTIONS = ("geodesic", "literal")


@dataclass(frozen=True)
class ProxResult:
    """Outcome of one proximal step.

    ``stationarity`` is the norm of the Riemannian gradient at the returned
    point (restricted to the face where the step is posed).
    """

    lambda_new: np.ndarray
    objective_value: float
    iterations: int
    converged: bool
    stationarity: float = 0.0


def _check_convention(convention):
    if convention not in CONVENTIONS:
        raise ContractViolation(f"hs_convention must be one of {CONVENTIONS}, got {convention!r}")


def angle_penalty(theta, convention="geodesic"):
    """Squared distance ``D(theta)`` as a function of the sphere angle."""
    theta = np.asarray(theta, dtype=float)
    if convention == "geodesic":
        return theta * theta
    # arccos(1 - 2 c^2) with c = 1 - cos(theta), written without cancellation
    c = 2.0 * np.sin(0.5 * theta) ** 2
    return 2.0 * np.arcsin(np.clip(c, 0.0, 1.0))


def _penalty_slope(theta, convention):
    """``D'(theta) / (2 sin theta)``, continuous at 0 (value 1)."""
    theta = np.asarray(theta, dtype=float)
    if convention == "geodesic":
        small = theta < 1e-8
        safe = np.where(small, 1.0, theta)
        return np.where(small, 1.0 + theta * theta / 6.0, safe / np.sin(np.where(small, 1.0, safe)))
    c = 2.0 * np.sin(0.5 * theta) ** 2
    return 1.0 / np.sqrt(np.clip(1.0 - c * c, 1e-300, None))


def sphere_angle(q, q_hat):
    """Angle between unit vectors, accurate for small angles (chord form)."""
    chord = np.linalg.norm(q - q_hat, axis=-1)
    return 2.0 * np.arcsin(np.clip(0.5 * chord, 0.0, 1.0))


def hs_objective(lam, lam_hat, payoff, tau, convention="geodesic"):
    """Value of the proximal objective; broadcasts over leading axes."""
    lam = np.asarray(lam, dtype=float)
    theta = sphere_angle(np.sqrt(np.clip(lam, 0, None)), np.sqrt(np.clip(np.asarray(lam_hat, float), 0, None)))
    return -0.25 * np.sum(np.asarray(payoff) * lam, axis=-1) + angle_penalty(theta, convention) / (2.0 * tau)


def prox_hs_batch(lam_hat, payoff, tau, convention="geodesic"):
    """Solve the spherical Hellinger proximal step for many agents.

    Parameters
    ----------
    lam_hat : ndarray, shape (N, n)
        Current labels.
    payoff : ndarray, shape (N, n)
        Averaged payoffs ``(J*psi)(x_a, .)``.
    tau : float
    convention : {"geodesic", "literal"}

    Returns
    -------
    lam_new : ndarray, shape (N, n)
    objective : ndarray, shape (N,)
    stationarity : ndarray, shape (N,)
    iterations : int
    """
    _check_convention(convention)
    if not tau > 0:
        raise ContractViolation(f"tau must be positive, got {tau}")
    lam_hat = np.atleast_2d(np.asarray(lam_hat, dtype=float))
    p = np.atleast_2d(np.asarray(payoff, dtype=float))
    N, n = lam_hat.shape
    active = lam_hat > PIN_TOL
    qh = np.where(active, np.sqrt(np.clip(lam_hat, 0, None)), 0.0)
    qh /= np.linalg.norm(qh, axis=1, keepdims=True)
    half = 0.5 * p
    top = np.max(np.where(active, half, -np.inf), axis=1, keepdims=True)
    gap = np.where(active, top - half, 0.0)  # >= 0 on the active face

    def solve_at(u):
        den = u[:, None] + gap
        z = np.where(active, qh / den, 0.0)
        zn = np.linalg.norm(z, axis=1)
        q = z / zn[:, None]
        theta = sphere_angle(q, qh)
        return q, theta, 1.0 / zn

    def residual(u):
        _, theta, c = solve_at(u)
        return c - _penalty_slope(theta, convention) / tau

    # residual(u) < 0 as u -> 0 and > 0 for large u; bracket in log u
    lo = np.full(N, np.log(1e-300 + 1e-30 / tau))
    hi = np.full(N, np.log(np.pi / tau + 1.0))
    for _ in range(200):
        need = residual(np.exp(hi)) < 0
        if not need.any():
            break
        hi = np.where(need, hi + np.log(4.0), hi)
    iterations = 0
    for iterations in range(1, BISECTION_STEPS + 1):
        mid = 0.5 * (lo + hi)
        pos = residual(np.exp(mid)) >= 0
        hi = np.where(pos, mid, hi)
        lo = np.where(pos, lo, mid)
        if np.all(hi - lo <= 4e-16 * np.maximum(1.0, np.abs(hi))):
            break
    q, theta, _ = solve_at(np.exp(hi))
    lam_new = q * q
    lam_new /= lam_new.sum(axis=1, keepdims=True)

    objective = -0.25 * np.sum(p * lam_new, axis=1) + angle_penalty(theta, convention) / (2.0 * tau)
    # Riemannian gradient restricted to the active face
    g = -0.5 * p * q - (_penalty_slope(theta, convention) / tau)[:, None] * (qh - np.cos(theta)[:, None] * q)
    g = np.where(active, g, 0.0)
    g -= np.sum(g * q, axis=1, keepdims=True) * q
    stationarity = np.linalg.norm(g, axis=1)
    return lam_new, objective, stationarity, iterations


def _stationarity_ok(stat, payoff, tau):
    scale = max(1.0, float(np.abs(payoff).max(initial=0.0)), 1.0 / tau)
    return stat <= STATIONARITY_TOL * scale


def payoff_vector(x, psi, kernel):
    """Averaged payoffs ``(J*psi)(x, h)`` for one position."""
    return kernel.convolve(np.atleast_1d(np.asarray(x, dtype=float))[None, :], psi)[0]


def payoff_functional(x, lam, psi, kernel):
    """``-1/4 sum_h (J*psi)(x, h) lam_h``."""
    return float(-0.25 * payoff_vector(x, psi, kernel) @ np.asarray(lam, dtype=float))


def prox_hs(x, lam_hat, psi, tau, kernel, convention="geodesic"):
    """Spherical Hellinger proximal step for one agent.

    Minimizes ``payoff_functional(x, lam, psi, J) + D(lam, lam_hat) / (2 tau)``
    over the simplex, where ``D`` is the squared spherical Hellinger
    distance. Components of ``lam_hat`` below ``1e-14`` stay at zero.

    Returns
    -------
    ProxResult
    """
    lam_hat = as_distribution(lam_hat)
    p = payoff_vector(x, psi, kernel)
    lam_new, obj, stat, its = prox_hs_batch(lam_hat[None, :], p[None, :], tau, convention)
    return ProxResult(lam_new[0], float(obj[0]), its, bool(_stationarity_ok(stat[0], p, tau)), float(stat[0]))


def el_residual_hs(lam_hat, lam_new, tau, x, psi, kernel, space=None):
    """BL norm of ``(lam_new - lam_hat)/tau - T(x, lam_new, psi)`` for the replicator ``T``."""
    lam_hat = np.asarray(lam_hat, dtype=float)
    lam_new = np.asarray(lam_new, dtype=float)
    space = discrete_space(lam_new.size) if space is None else space
    p = payoff_vector(x, psi, kernel)
    T = replicator_batch(p[None, :], lam_new[None, :])[0]
    return float(space.bl_norms((lam_new - lam_hat) / tau - T))


def el_residuals_hs_batch(lam_hat, lam_new, payoff, tau, space):
    """Row-wise version of :func:`el_residual_hs` given precomputed payoffs."""
    T = replicator_batch(payoff, lam_new)
    return space.bl_norms((lam_new - lam_hat) / tau - T)


def run_implicit_replicator(initial, velocity, kernel, config, *, space=None, convention="geodesic",
                            record_residuals=False):
    """Alternate scheme whose label step is the spherical Hellinger proximal step.

    No step-size guard is needed: the proximal step stays in the simplex for
    every ``tau``.

    Parameters
    ----------
    initial : EmpiricalMeasure
    velocity : VelocityField
    kernel : PayoffKernel
    config : SchemeConfig
    space : LabelMetricSpace, optional
    convention : {"geodesic", "literal"}
    record_residuals : bool
        Store the per-step, per-agent Euler-Lagrange residuals in
        ``trajectory.log["el_residuals"]`` (shape ``(k, N)``).

    Raises
    ------
    ProxNonConvergence
        If a proximal solve misses the stationarity tolerance.
    """
    _check_convention(convention)
    space = discrete_space(initial.n) if space is None else space
    tau = config.tau
    log = {"prox_iterations": [], "hs_step_ratio": []}
    if record_residuals:
        log["el_residuals"] = []

    def update(i, psi):
        p = kernel.convolve(psi.positions, psi)
        lam_new, _, stat, its = prox_hs_batch(psi.labels, p, tau, convention)
        ok = _stationarity_ok(stat, p, tau)
        if not np.all(ok):
            a = int(np.flatnonzero(~ok)[0])
            raise ProxNonConvergence(
                f"proximal step failed for agent {a} at step {i} (stationarity {stat[a]:.3e})", step=i, agent=a)
        log["prox_iterations"].append(its)
        theta = sphere_angle(np.sqrt(lam_new), np.sqrt(psi.labels))
        log["hs_step_ratio"].append(float(theta.max()) / tau)
        if record_residuals:
            log["el_residuals"].append(el_residuals_hs_batch(psi.labels, lam_new, p, tau, space))
        return lam_new

    traj = run_scheme(initial, velocity, update, config, operator=ReplicatorOperator(kernel),
                      space=space, log=log)
    if record_residuals:
        traj.log["el_residuals"] = np.array(traj.log["el_residuals"]).reshape(-1, initial.N)
    return traj

