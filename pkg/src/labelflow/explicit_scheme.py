"""Alternate Lagrangian time stepping with an explicit label update.

Each step first moves every label (``lam' = lam + tau T(x, lam, psi_i)``),
forms the intermediate measure with the new labels at the old positions,
then moves positions with ``x' = x + tau v(x, lam', psi_tilde)``. Agents are
tracked, never resampled, and the trajectory is affine in time between
nodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ensemble import EmpiricalMeasure, support_radius
from .errors import ContractViolation, SchemeAbort, SimplexViolation
from .fields import delta_estimate
from .label_geometry import discrete_space

LABEL_MODES = ("explicit", "prox_hellinger", "prox_markov")
SIMPLEX_TOL = 1e-10
GUARD_SAMPLES = 10_000
GUARD_SAFETY = 2.0


@dataclass(frozen=True)
class SchemeConfig:
    """Time grid and label-update mode of a run.

    ``tau = T_final / k``; snapshot times are where studies compare runs.
    """

    T_final: float
    k: int
    label_mode: str = "explicit"
    snapshot_times: tuple = ()

    def __post_init__(self):
        if not (self.T_final > 0 and math.isfinite(self.T_final)):
            raise ContractViolation(f"T_final must be positive, got {self.T_final}")
        if int(self.k) != self.k or self.k < 1:
            raise ContractViolation(f"k must be a positive integer, got {self.k}")
        if self.label_mode not in LABEL_MODES:
            raise ContractViolation(f"label_mode must be one of {LABEL_MODES}, got {self.label_mode!r}")
        snaps = tuple(float(t) for t in self.snapshot_times)
        if any(t < 0 or t > self.T_final for t in snaps):
            raise ContractViolation("snapshot times must lie in [0, T_final]")
        if list(snaps) != sorted(snaps):
            raise ContractViolation("snapshot times must be sorted")
        object.__setattr__(self, "k", int(self.k))
        object.__setattr__(self, "T_final", float(self.T_final))
        object.__setattr__(self, "snapshot_times", snaps)

    @property
    def tau(self):
        return self.T_final / self.k

    def with_k(self, k):
        return SchemeConfig(self.T_final, k, self.label_mode, self.snapshot_times)


@dataclass
class Trajectory:
    """Node states of a run plus the intermediate labels.

    Attributes
    ----------
    config : SchemeConfig
    weights : ndarray, shape (N,)
    positions : ndarray, shape (steps + 1, N, d)
    labels : ndarray, shape (steps + 1, N, n)
    velocity, operator :
        Fields that drove the run (used by :func:`weak_residual`).
    terminated_at : int or None
        Step index at which the run stopped early, if it did.
    log : dict
        Per-run diagnostics (guard margin, prox statistics, ...).
    """

    config: SchemeConfig
    weights: np.ndarray
    positions: np.ndarray
    labels: np.ndarray
    velocity: object = None
    operator: object = None
    space: object = None
    terminated_at: int | None = None
    log: dict = field(default_factory=dict)

    @property
    def tau(self):
        return self.config.tau

    @property
    def steps(self):
        """Number of completed steps."""
        return self.positions.shape[0] - 1

    @property
    def times(self):
        return self.tau * np.arange(self.steps + 1)

    @property
    def horizon(self):
        """Last time covered by the stored nodes."""
        return self.steps * self.tau

    def measure(self, i):
        return EmpiricalMeasure(self.positions[i], self.labels[i], self.weights, validate=False)

    @property
    def nodes(self):
        return [(t, self.measure(i)) for i, t in enumerate(self.times)]

    def intermediate(self, i):
        """Measure with positions of node ``i`` and labels of node ``i + 1``."""
        return EmpiricalMeasure(self.positions[i], self.labels[i + 1], self.weights, validate=False)

    @property
    def intermediates(self):
        return [self.intermediate(i) for i in range(self.steps)]

    def _locate(self, t):
        if t < -1e-12 or t > self.horizon + 1e-12:
            raise ContractViolation(f"time {t} outside [0, {self.horizon}]")
        s = min(max(t, 0.0), self.horizon) / self.tau
        i = min(int(math.floor(s)), max(self.steps - 1, 0))
        return i, s - i

    def state_at(self, t):
        """Agent positions and labels at time ``t`` by affine interpolation."""
        if self.steps == 0:
            return self.positions[0], self.labels[0]
        i, frac = self._locate(t)
        X = self.positions[i] + frac * (self.positions[i + 1] - self.positions[i])
        L = self.labels[i] + frac * (self.labels[i + 1] - self.labels[i])
        return X, L

    def at(self, t):
        X, L = self.state_at(t)
        return EmpiricalMeasure(X, L, self.weights, validate=False)

    @property
    def final(self):
        return self.measure(self.steps)

    def snapshots(self, times=None):
        times = self.config.snapshot_times if times is None else times
        return [self.at(t) for t in times]


# --------------------------------------------------------------------------- radii


def gronwall_radius(r, M_v, T):
    """Radius containing every discrete trajectory started inside the ball of radius ``r``.

    ``R1 = 1 + (r + 3 M_v T) exp(3 M_v T)`` bounds the position growth and
    ``R = max(R1, r + 2 M_v (1 + R1) T + 1)`` adds the label part.
    """
    growth = 3.0 * M_v * T
    R1 = 1.0 + (r + growth) * math.exp(growth)
    return max(R1, r + 2.0 * M_v * (1.0 + R1) * T + 1.0)


def equicontinuity_constant(M_v, M_T, R):
    """Lipschitz-in-time constant ``3 (M_v + M_T)(1 + R)`` for W1 along a run."""
    return 3.0 * (M_v + M_T) * (1.0 + R)


def step_size_guard(T, R, tau, *, samples=GUARD_SAMPLES, safety=1.0, d=1, n=2, rng=None):
    """Whether ``tau <= 1 / (safety * delta_R)`` for the operator ``T``.

    ``delta_R`` comes from :func:`~labelflow.fields.delta_estimate`; a zero
    estimate always passes.
    """
    delta = delta_estimate(T, R, samples, d=d, n=n, rng=rng)
    return delta == 0.0 or tau * safety * delta <= 1.0


# --------------------------------------------------------------------------- steps


def label_step_explicit(psi, T, tau, *, step=None):
    """Explicit label update for all agents of ``psi``.

    Raises
    ------
    SimplexViolation
        If a component drops below ``-1e-10``.
    """
    L = psi.labels + tau * T.batch(psi.positions, psi.labels, psi)
    low = L.min(axis=1)
    bad = np.flatnonzero(low < -SIMPLEX_TOL)
    if bad.size:
        a = int(bad[0])
        where = f" at step {step}" if step is not None else ""
        raise SimplexViolation(
            f"agent {a} left the simplex{where} (min component {low[a]:.3e}); use a smaller tau",
            agent=a, step=step,
        )
    L = np.clip(L, 0.0, None)
    return L / L.sum(axis=1, keepdims=True)


def intermediate_measure(psi, new_labels):
    """Measure with the positions and weights of ``psi`` and the given labels."""
    new_labels = np.asarray(new_labels, dtype=float)
    if new_labels.shape != psi.labels.shape:
        raise ContractViolation(f"expected labels of shape {psi.labels.shape}, got {new_labels.shape}")
    return psi.with_labels(new_labels)


def position_step(psi, psi_tilde, new_labels, v, tau):
    """``x' = x + tau v(x, lam', psi_tilde)``: old position, new label, intermediate crowd."""
    V = v.batch(psi.positions, new_labels, psi_tilde)
    if not np.all(np.isfinite(V)):
        raise ContractViolation("velocity field returned non-finite values")
    return psi.positions + tau * V


def run_scheme(initial, velocity, label_update, config, *, operator=None, space=None,
               radius_bound=None, monitor=None, log=None):
    """Shared time loop for every label mode.

    ``label_update(i, psi_i)`` returns the new labels of step ``i``; it may
    raise :class:`SchemeAbort`. ``monitor(i, labels)`` returning False stops
    the run cleanly at the last valid node.
    """
    space = discrete_space(initial.n) if space is None else space
    k, tau = config.k, config.tau
    N, d, n = initial.N, initial.d, initial.n
    X = np.empty((k + 1, N, d))
    L = np.empty((k + 1, N, n))
    X[0], L[0] = initial.positions, initial.labels
    log = {} if log is None else log
    done = k
    for i in range(k):
        psi = EmpiricalMeasure(X[i], L[i], initial.weights, validate=False)
        new_labels = label_update(i, psi)
        if monitor is not None and not monitor(i + 1, new_labels):
            done = i
            break
        psi_tilde = EmpiricalMeasure(X[i], new_labels, initial.weights, validate=False)
        L[i + 1] = new_labels
        X[i + 1] = position_step(psi, psi_tilde, new_labels, velocity, tau)
        if radius_bound is not None:
            r = support_radius(EmpiricalMeasure(X[i + 1], L[i + 1], initial.weights, validate=False), space)
            if r > radius_bound * (1 + 1e-9):
                raise SchemeAbort(f"support radius {r:.4g} exceeded the bound {radius_bound:.4g} at step {i + 1}",
                                  step=i + 1, reason="radius")
    traj = Trajectory(config, initial.weights, X[: done + 1].copy(), L[: done + 1].copy(),
                      velocity=velocity, operator=operator, space=space, log=log)
    if done < k:
        traj.terminated_at = done + 1
    return traj


def run_explicit(initial, velocity, operator, config, *, space=None, guard=True,
                 guard_samples=GUARD_SAMPLES, seed=0):
    """Run the explicit scheme.

    Parameters
    ----------
    initial : EmpiricalMeasure
    velocity : VelocityField
    operator : LabelOperator
    config : SchemeConfig
    space : LabelMetricSpace, optional
    guard : bool
        Check ``tau`` against the sampled positivity margin on the Gronwall
        ball before stepping, and the support radius after every step.
    guard_samples : int
    seed : int
        Seed of the guard's sampler.

    Returns
    -------
    Trajectory

    Raises
    ------
    SchemeAbort
        With the offending step index when the guard or the simplex check fails.
    """
    space = discrete_space(initial.n) if space is None else space
    tau = config.tau
    log = {}
    R = None
    if guard:
        r = support_radius(initial, space)
        R = gronwall_radius(r, velocity.growth_M_v, config.T_final)
        delta = delta_estimate(operator, R, guard_samples, d=initial.d, n=initial.n,
                               rng=np.random.default_rng(seed))
        log.update(gronwall_radius=R, delta_estimate=delta)
        if delta > 0 and tau * GUARD_SAFETY * delta > 1.0:
            raise SchemeAbort(
                f"step size {tau:.4g} exceeds 1/(2 delta_R) = {1 / (GUARD_SAFETY * delta):.4g}; increase k",
                step=0, reason="guard")

    def update(i, psi):
        try:
            return label_step_explicit(psi, operator, tau, step=i)
        except SimplexViolation as exc:
            raise SchemeAbort(str(exc), step=i, reason="simplex") from exc

    return run_scheme(initial, velocity, update, config, operator=operator, space=space,
                      radius_bound=R, log=log)


# --------------------------------------------------------------------------- weak residual


@dataclass(frozen=True)
class TestFunction:
    """Smooth observable ``phi(x, lam)`` with its two partial gradients.

    Each callable maps ``(X, L)`` arrays of shape ``(N, d)``/``(N, n)`` to
    values ``(N,)``, ``(N, d)`` and ``(N, n)`` respectively.
    """

    __test__ = False  # not a pytest class

    name: str
    value: object
    grad_x: object
    grad_lam: object


def residual_dictionary(d, n, *, bump_center=None, bump_width=1.0):
    """Observables ``1``, ``x_j``, ``lam_h``, ``x_j lam_h`` and a Gaussian bump in ``x``."""
    zx = lambda X, L: np.zeros_like(X)  # noqa: E731
    zl = lambda X, L: np.zeros_like(L)  # noqa: E731
    out = [TestFunction("one", lambda X, L: np.ones(X.shape[0]), zx, zl)]
    for j in range(d):
        ej = np.eye(d)[j]
        out.append(TestFunction(f"x{j}", lambda X, L, j=j: X[:, j],
                                lambda X, L, ej=ej: np.broadcast_to(ej, X.shape).copy(), zl))
    for h in range(n):
        eh = np.eye(n)[h]
        out.append(TestFunction(f"lam{h}", lambda X, L, h=h: L[:, h], zx,
                                lambda X, L, eh=eh: np.broadcast_to(eh, L.shape).copy()))
    for j in range(d):
        for h in range(n):
            ej, eh = np.eye(d)[j], np.eye(n)[h]
            out.append(TestFunction(
                f"x{j}*lam{h}",
                lambda X, L, j=j, h=h: X[:, j] * L[:, h],
                lambda X, L, ej=ej, h=h: L[:, h, None] * ej[None, :],
                lambda X, L, eh=eh, j=j: X[:, j, None] * eh[None, :],
            ))
    c = np.zeros(d) if bump_center is None else np.asarray(bump_center, dtype=float)
    s2 = float(bump_width) ** 2

    def bump(X, L):
        return np.exp(-0.5 * np.sum((X - c) ** 2, axis=1) / s2)

    out.append(TestFunction("bump", bump, lambda X, L: -(X - c) / s2 * bump(X, L)[:, None], zl))
    return out


def weak_residual(traj, phi, t):
    """Defect of the discrete trajectory in the weak continuity equation at time ``t``.

    Returns ``d/dt int phi dPsi(t) - int grad(phi) . b dPsi(t)`` where the
    time derivative is exact for the affine agent motion on the current
    interval and ``b = (v, T)`` is evaluated at the interpolated state and
    measure.

    Raises
    ------
    ContractViolation
        If ``t`` is a grid node or outside the run.
    """
    tau = traj.tau
    s = t / tau
    if abs(s - round(s)) < 1e-9 or t <= 0 or t >= traj.horizon:
        raise ContractViolation(f"time {t} must lie strictly inside a step interval")
    i = int(math.floor(s))
    frac = s - i
    X0, X1 = traj.positions[i], traj.positions[i + 1]
    L0, L1 = traj.labels[i], traj.labels[i + 1]
    X = (1 - frac) * X0 + frac * X1
    L = (1 - frac) * L0 + frac * L1
    psi_t = EmpiricalMeasure(X, L, traj.weights, validate=False)
    gx, gl = phi.grad_x(X, L), phi.grad_lam(X, L)
    dXdt, dLdt = (X1 - X0) / tau, (L1 - L0) / tau
    v = traj.velocity.batch(X, L, psi_t)
    T = traj.operator.batch(X, L, psi_t)
    per_agent = np.sum(gx * (dXdt - v), axis=1) + np.sum(gl * (dLdt - T), axis=1)
    return float(traj.weights @ per_agent)
