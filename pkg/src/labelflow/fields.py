"""Velocity fields, payoff kernels, rate-matrix fields and label operators.

Every field exposes a vectorized ``batch`` method acting on all agents at
once and a scalar ``eval`` convenience wrapper. ``psi`` arguments are
:class:`~labelflow.ensemble.EmpiricalMeasure` instances.
"""

from __future__ import annotations

import numpy as np

from .ensemble import EmpiricalMeasure
from .errors import ContractViolation, InvalidRateMatrix

RATE_TOL = 1e-10


def _require_nonempty(psi):
    if psi is None or psi.N == 0:
        raise ContractViolation("the interaction measure must contain at least one agent")


# --------------------------------------------------------------------------- kernels


class PayoffKernel:
    """Payoff ``J(x, u, x', u')`` for playing label ``u`` at ``x`` against ``u'`` at ``x'``.

    Parameters
    ----------
    func : callable, optional
        Scalar evaluation ``func(x, u, x2, u2) -> float``.
    growth_M_J : float
        Constant with ``|J| <= M_J (1 + |x| + |x'|)``.
    convolve : callable, optional
        Vectorized ``convolve(X, psi) -> (N, n)`` returning the averaged
        payoffs ``(J*psi)(x_a, h)``. Derived from ``func`` by direct summation
        when omitted.
    name : str
    """

    def __init__(self, func=None, growth_M_J=1.0, *, convolve=None, name="custom"):
        if func is None and convolve is None:
            raise ContractViolation("a payoff kernel needs func or convolve")
        if growth_M_J < 0:
            raise ContractViolation("growth constant must be nonnegative")
        self._func = func
        self._convolve = convolve
        self.growth_M_J = float(growth_M_J)
        self.name = name

    def __repr__(self):
        return f"PayoffKernel({self.name!r}, M_J={self.growth_M_J})"

    def eval(self, x, u, x2, u2):
        if self._func is None:
            raise ContractViolation(f"kernel {self.name!r} has no scalar form")
        return float(self._func(np.asarray(x, float), int(u), np.asarray(x2, float), int(u2)))

    def convolve(self, X, psi):
        """Averaged payoffs ``(J*psi)(x_a, h) = sum_b w_b sum_h' J(x_a, h, x_b, h') lam_b[h']``.

        Parameters
        ----------
        X : ndarray, shape (N, d)
        psi : EmpiricalMeasure

        Returns
        -------
        ndarray, shape (N, n)
        """
        _require_nonempty(psi)
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self._convolve is not None:
            return np.asarray(self._convolve(X, psi), dtype=float)
        n = psi.n
        out = np.zeros((X.shape[0], n))
        for a, x in enumerate(X):
            for h in range(n):
                acc = 0.0
                for b in range(psi.N):
                    xb, lb = psi.positions[b], psi.labels[b]
                    acc += psi.weights[b] * sum(self._func(x, h, xb, h2) * lb[h2] for h2 in range(n))
                out[a, h] = acc
        return out


def _matrix_convolve(A, X, psi, spatial=None):
    A = np.asarray(A, dtype=float)
    if A.shape != (psi.n, psi.n):
        raise ContractViolation(f"payoff matrix must be {psi.n}x{psi.n}, got {A.shape}")
    if spatial is None:
        opponent = psi.weights @ psi.labels
        return np.broadcast_to(A @ opponent, (X.shape[0], psi.n)).copy()
    W = spatial(X, psi.positions) * psi.weights[None, :]
    return (W @ psi.labels) @ A.T


def zero_kernel():
    return PayoffKernel(lambda x, u, x2, u2: 0.0, 0.0,
                        convolve=lambda X, psi: np.zeros((X.shape[0], psi.n)), name="zero")


def constant_kernel(c=1.0):
    c = float(c)
    return PayoffKernel(lambda x, u, x2, u2: c, abs(c),
                        convolve=lambda X, psi: np.full((X.shape[0], psi.n), c), name="constant")


def matrix_game(A):
    """Position-free game: ``J(x, u, x', u') = A[u, u']``."""
    A = np.array(A, dtype=float)
    return PayoffKernel(lambda x, u, x2, u2: A[u, u2], float(np.abs(A).max(initial=0.0)),
                        convolve=lambda X, psi: _matrix_convolve(A, X, psi), name="matrix_game")


def identity_kernel(n=None):
    """Coordination kernel: payoff 1 when both labels agree, else 0."""

    def convolve(X, psi):
        return np.broadcast_to(psi.weights @ psi.labels, (X.shape[0], psi.n)).copy()

    return PayoffKernel(lambda x, u, x2, u2: 1.0 if u == u2 else 0.0, 1.0,
                        convolve=convolve, name="identity")


def local_game(A, length_scale=1.0):
    """Game with Gaussian spatial weighting.

    ``J(x, u, x', u') = A[u, u'] * exp(-|x - x'|^2 / (2 length_scale^2))``.
    """
    A = np.array(A, dtype=float)
    ell = float(length_scale)
    if ell <= 0:
        raise ContractViolation("length_scale must be positive")

    def spatial(X, Y):
        d2 = np.sum((X[:, None, :] - Y[None, :, :]) ** 2, axis=-1)
        return np.exp(-0.5 * d2 / ell**2)

    def func(x, u, x2, u2):
        return A[u, u2] * float(np.exp(-0.5 * np.sum((x - x2) ** 2) / ell**2))

    return PayoffKernel(func, float(np.abs(A).max(initial=0.0)),
                        convolve=lambda X, psi: _matrix_convolve(A, X, psi, spatial), name="local_game")


KERNELS = {
    "zero": lambda **kw: zero_kernel(),
    "constant": lambda c=1.0: constant_kernel(c),
    "identity": lambda: identity_kernel(),
    "matrix_game": lambda A: matrix_game(A),
    "local_game": lambda A, length_scale=1.0: local_game(A, length_scale),
}


def builtin_kernel(kind, **params):
    """Look up a payoff kernel by registry name."""
    try:
        factory = KERNELS[kind]
    except KeyError:
        raise ContractViolation(f"unknown payoff kernel {kind!r}; known: {sorted(KERNELS)}") from None
    return factory(**params)


# --------------------------------------------------------------------------- velocities


class VelocityField:
    """Velocity ``v(x, lam, psi)`` in R^d.

    Parameters
    ----------
    batch : callable
        ``batch(X, L, psi) -> (N, d)``.
    growth_M_v : float
        Constant with ``|v| <= M_v (1 + |x| + ||lam||_BL + m1(psi))``.
    """

    def __init__(self, batch, growth_M_v, name="custom"):
        if growth_M_v < 0:
            raise ContractViolation("growth constant must be nonnegative")
        self._batch = batch
        self.growth_M_v = float(growth_M_v)
        self.name = name

    def __repr__(self):
        return f"VelocityField({self.name!r}, M_v={self.growth_M_v})"

    def batch(self, X, L, psi):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        L = np.atleast_2d(np.asarray(L, dtype=float))
        V = np.asarray(self._batch(X, L, psi), dtype=float)
        if V.shape != X.shape:
            raise ContractViolation(f"velocity returned shape {V.shape}, expected {X.shape}")
        return V

    def eval(self, x, lam, psi):
        return self.batch(np.atleast_1d(x)[None, :], np.asarray(lam)[None, :], psi)[0]

    def __add__(self, other):
        return VelocityField(lambda X, L, psi: self.batch(X, L, psi) + other.batch(X, L, psi),
                             self.growth_M_v + other.growth_M_v, name=f"{self.name}+{other.name}")


def _per_label_drift(drifts):
    C = np.array(drifts, dtype=float)
    if C.ndim == 1:
        C = C[:, None]

    def batch(X, L, psi):
        if L.shape[1] != C.shape[0] or X.shape[1] != C.shape[1]:
            raise ContractViolation(f"drift table is {C.shape}, state is (d={X.shape[1]}, n={L.shape[1]})")
        return L @ C

    return VelocityField(batch, float(np.linalg.norm(C, axis=1).max(initial=0.0)), name="per_label_drift")


def _mean_field_attraction(kappa=1.0):
    kappa = float(kappa)

    def batch(X, L, psi):
        _require_nonempty(psi)
        return kappa * (psi.barycenter()[None, :] - X)

    return VelocityField(batch, abs(kappa), name="mean_field_attraction")


def _constant_velocity(v):
    v = np.atleast_1d(np.array(v, dtype=float))

    def batch(X, L, psi):
        if X.shape[1] != v.size:
            raise ContractViolation(f"constant velocity has {v.size} components, positions have {X.shape[1]}")
        return np.broadcast_to(v, X.shape).copy()

    return VelocityField(batch, float(np.linalg.norm(v)), name="constant")


def _zero_velocity():
    return VelocityField(lambda X, L, psi: np.zeros_like(X), 0.0, name="zero")


VELOCITIES = {
    "per_label_drift": lambda drifts: _per_label_drift(drifts),
    "mean_field_attraction": lambda kappa=1.0: _mean_field_attraction(kappa),
    "constant": lambda v: _constant_velocity(v),
    "zero": lambda: _zero_velocity(),
}


def builtin_velocity(kind, **params):
    """Construct a registered velocity field.

    ``per_label_drift`` needs ``drifts`` (one vector per label) and returns
    ``sum_h drifts[h] lam_h``; ``mean_field_attraction`` takes ``kappa`` and
    returns ``kappa (barycenter(psi) - x)``; ``constant`` returns the fixed
    vector ``v``; ``zero`` returns 0.
    """
    try:
        factory = VELOCITIES[kind]
    except KeyError:
        raise ContractViolation(f"unknown velocity kind {kind!r}; known: {sorted(VELOCITIES)}") from None
    return factory(**params)


# --------------------------------------------------------------------------- rate matrices


def check_rate_matrix(Q, tol=RATE_TOL):
    """Raise :class:`InvalidRateMatrix` unless ``Q`` (or a stack of them) is a rate matrix.

    A rate matrix has nonnegative off-diagonal entries and zero column sums.
    """
    Q = np.asarray(Q, dtype=float)
    if Q.ndim < 2 or Q.shape[-1] != Q.shape[-2]:
        raise InvalidRateMatrix(f"rate matrix must be square, got shape {Q.shape}")
    n = Q.shape[-1]
    off = Q[..., ~np.eye(n, dtype=bool)]
    if np.any(off < -tol):
        raise InvalidRateMatrix(f"negative off-diagonal rate {off.min():.3e}")
    scale = max(1.0, float(np.abs(Q).max(initial=0.0)))
    colsum = np.abs(Q.sum(axis=-2)).max(initial=0.0)
    if colsum > tol * scale:
        raise InvalidRateMatrix(f"columns of the rate matrix do not sum to zero (max |sum| = {colsum:.3e})")
    return Q


class RateMatrixField:
    """Rate matrices ``Q(x, psi)``; column ``h`` holds the jump rates out of label ``h``.

    Parameters
    ----------
    batch : callable
        ``batch(X, psi) -> (N, n, n)``.
    growth_M_Q : float
        Bound on the entries of ``Q``.
    """

    def __init__(self, batch, growth_M_Q, name="custom", n=None):
        self._batch = batch
        self.growth_M_Q = float(growth_M_Q)
        self.name = name
        self.n = n

    def __repr__(self):
        return f"RateMatrixField({self.name!r}, M_Q={self.growth_M_Q})"

    def batch(self, X, psi):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return check_rate_matrix(self._batch(X, psi))

    def eval(self, x, psi):
        return self.batch(np.atleast_1d(x)[None, :], psi)[0]


def constant_rates(Q):
    Q = check_rate_matrix(np.array(Q, dtype=float))

    def batch(X, psi):
        return np.broadcast_to(Q, (X.shape[0],) + Q.shape)

    return RateMatrixField(batch, float(np.abs(Q).max(initial=0.0)), name="constant", n=Q.shape[0])


def birth_death_rates(up, down, modulation=0.0):
    """Nearest-neighbour chain ``h -> h+1`` at rate ``up[h]`` and ``h+1 -> h`` at ``down[h]``.

    With ``modulation = m`` (``|m| < 1``) the upward rates are multiplied by
    ``1 + m tanh(x_1 - barycenter(psi)_1)``, so agents ahead of the crowd
    climb faster. Such chains are always reversible.
    """
    up = np.asarray(up, dtype=float)
    down = np.asarray(down, dtype=float)
    if up.shape != down.shape or up.ndim != 1:
        raise ContractViolation("up and down rates must be vectors of equal length")
    if np.any(up <= 0) or np.any(down <= 0):
        raise ContractViolation("birth-death rates must be positive")
    m = float(modulation)
    if abs(m) >= 1:
        raise ContractViolation("modulation must lie in (-1, 1)")
    n = up.size + 1
    idx = np.arange(n - 1)

    def batch(X, psi):
        N = X.shape[0]
        if m != 0.0:
            _require_nonempty(psi)
            factor = 1.0 + m * np.tanh(X[:, 0] - psi.barycenter()[0])
        else:
            factor = np.ones(N)
        Q = np.zeros((N, n, n))
        Q[:, idx + 1, idx] = factor[:, None] * up[None, :]
        Q[:, idx, idx + 1] = down[None, :]
        Q[:, np.arange(n), np.arange(n)] = -Q.sum(axis=1)
        return Q

    bound = 2.0 * (1 + abs(m)) * max(up.max(), down.max())
    return RateMatrixField(batch, bound, name="birth_death", n=n)


RATES = {
    "constant": lambda Q: constant_rates(Q),
    "birth_death": lambda up, down, modulation=0.0: birth_death_rates(up, down, modulation),
}


def builtin_rates(kind, **params):
    """Look up a rate-matrix field by registry name."""
    try:
        factory = RATES[kind]
    except KeyError:
        raise ContractViolation(f"unknown rate field {kind!r}; known: {sorted(RATES)}") from None
    return factory(**params)


# --------------------------------------------------------------------------- label operators


class LabelOperator:
    """Zero-sum label velocity ``T(x, lam, psi)``.

    Parameters
    ----------
    batch : callable
        ``batch(X, L, psi) -> (N, n)``.
    growth_M_T : float
        Constant with ``||T||_BL <= M_T (1 + |x| + ||lam||_BL + m1(psi))``.
    """

    def __init__(self, batch, growth_M_T, name="custom"):
        self._batch = batch
        self.growth_M_T = float(growth_M_T)
        self.name = name

    def __repr__(self):
        return f"LabelOperator({self.name!r})"

    def batch(self, X, L, psi):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        L = np.atleast_2d(np.asarray(L, dtype=float))
        return np.asarray(self._batch(X, L, psi), dtype=float)

    def eval(self, x, lam, psi):
        return self.batch(np.atleast_1d(x)[None, :], np.asarray(lam)[None, :], psi)[0]


def replicator_batch(payoffs, L):
    """Replicator velocity ``(p_h - <p, lam>) lam_h`` row by row."""
    mean = np.sum(payoffs * L, axis=1, keepdims=True)
    return (payoffs - mean) * L


class ReplicatorOperator(LabelOperator):
    """Replicator dynamics driven by a payoff kernel."""

    def __init__(self, kernel):
        self.kernel = kernel
        super().__init__(self._apply, 2.0 * kernel.growth_M_J, name=f"replicator[{kernel.name}]")

    def _apply(self, X, L, psi):
        _require_nonempty(psi)
        return replicator_batch(self.kernel.convolve(X, psi), L)


class MarkovOperator(LabelOperator):
    """Linear label dynamics ``Q(x, psi) lam``."""

    def __init__(self, rates):
        self.rates = rates
        super().__init__(self._apply, 2.0 * rates.growth_M_Q, name=f"markov[{rates.name}]")

    def _apply(self, X, L, psi):
        Q = self.rates.batch(X, psi)
        return np.einsum("aij,aj->ai", Q, L)


def zero_operator():
    return LabelOperator(lambda X, L, psi: np.zeros_like(L), 0.0, name="zero")


def replicator_operator(x, lam, psi, kernel):
    """Replicator velocity of one agent at ``(x, lam)`` facing the crowd ``psi``."""
    _require_nonempty(psi)
    return ReplicatorOperator(kernel).eval(x, lam, psi)


def markov_operator(x, lam, psi, rates):
    """``Q(x, psi) @ lam`` for one agent; ``rates`` may be a field or a fixed matrix."""
    if not isinstance(rates, RateMatrixField):
        Q = check_rate_matrix(np.asarray(rates, dtype=float))
        return Q @ np.asarray(lam, dtype=float)
    return MarkovOperator(rates).eval(x, lam, psi)


# --------------------------------------------------------------------------- probes


def _sample_labels(rng, count, n):
    """Simplex samples mixing vertices, flat Dirichlet and near-vertex Dirichlet draws."""
    k_vert = min(count, n)
    flat = rng.dirichlet(np.ones(n), size=(count - k_vert + 1) // 2)
    peaked = rng.dirichlet(np.full(n, 0.15), size=count - k_vert - flat.shape[0])
    return np.vstack([np.eye(n)[:k_vert], flat, peaked])


def _sample_ball(rng, count, d, radius):
    g = rng.normal(size=(count, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = radius * rng.uniform(size=(count, 1)) ** (1.0 / d)
    return g * r


def sample_states(rng, count, d, n, R, crowd_size=8):
    """Random crowd and agent states inside the ball of radius ``R``.

    Positions satisfy ``|x| <= R - 1`` since probability labels have BL norm 1.
    """
    radius = max(R - 1.0, 0.0)
    crowd = EmpiricalMeasure(_sample_ball(rng, crowd_size, d, radius),
                             rng.dirichlet(np.ones(n), size=crowd_size))
    return _sample_ball(rng, count, d, radius), _sample_labels(rng, count, n), crowd


def delta_estimate(T, R, samples=10_000, *, d=1, n=2, rng=None, batch_size=100):
    """Empirical positivity margin of a label operator on the ball of radius ``R``.

    Returns the largest ``-T_h / lam_h`` over sampled states with
    ``lam_h > 0``, or 0 if ``T`` never points outward.

    Parameters
    ----------
    T : LabelOperator
    R : float
    samples : int
    d, n : int
        Position dimension and label count of the sampled states.
    rng : numpy.random.Generator, optional
    """
    if samples < 1:
        raise ContractViolation("samples must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    best = 0.0
    remaining = int(samples)
    while remaining > 0:
        m = min(batch_size, remaining)
        X, L, crowd = sample_states(rng, m, d, n, R)
        V = T.batch(X, L, crowd)
        pos = L > 0
        ratio = np.where(pos, -V / np.where(pos, L, 1.0), -np.inf)
        best = max(best, float(ratio.max()))
        remaining -= m
    return best
