"""Weighted particle clouds on positions x labels and their transport distance."""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy.sparse import coo_matrix, vstack

from .errors import ContractViolation, InvalidLabelError
from .label_geometry import NEGATIVE_TOL, RENORMALIZE_TOL, as_distribution, discrete_space

WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class AgentState:
    """One agent: a position ``x`` in R^d and a label distribution ``lam``."""

    x: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=float).reshape(-1)
        if not np.all(np.isfinite(x)):
            raise ContractViolation("agent position must be finite")
        x.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "lam", as_distribution(self.lam))


def _validate_labels(labels):
    L = np.array(labels, dtype=float)
    if L.ndim != 2:
        raise InvalidLabelError(f"labels must be a 2-D array, got shape {L.shape}")
    if not np.all(np.isfinite(L)):
        raise InvalidLabelError("labels contain non-finite values")
    bad = np.flatnonzero(np.any(L < -NEGATIVE_TOL, axis=1))
    if bad.size:
        raise InvalidLabelError(f"agent {bad[0]} has a negative label component {L[bad[0]].min():.3e}")
    L = np.clip(L, 0.0, None)
    sums = L.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > RENORMALIZE_TOL)
    if bad.size:
        raise InvalidLabelError(f"agent {bad[0]} label sums to {sums[bad[0]]!r}")
    return L / sums[:, None]


class EmpiricalMeasure:
    """A finite weighted sum of Dirac masses on positions x labels.

    Parameters
    ----------
    positions : array_like, shape (N, d)
    labels : array_like, shape (N, n)
        Rows are probability vectors.
    weights : array_like, shape (N,), optional
        Positive and summing to one; uniform by default.

    Notes
    -----
    Arrays are stored read-only, so a measure can be shared freely.
    """

    __slots__ = ("positions", "labels", "weights", "_key")

    def __init__(self, positions, labels, weights=None, *, validate=True):
        X = np.array(positions, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[0] == 0:
            raise ContractViolation(f"positions must be a nonempty (N, d) array, got {X.shape}")
        L = _validate_labels(labels) if validate else np.array(labels, dtype=float)
        if L.shape[0] != X.shape[0]:
            raise ContractViolation(f"{X.shape[0]} positions but {L.shape[0]} labels")
        if weights is None:
            w = np.full(X.shape[0], 1.0 / X.shape[0])
        else:
            w = np.array(weights, dtype=float).reshape(-1)
            if w.shape[0] != X.shape[0]:
                raise ContractViolation(f"{X.shape[0]} agents but {w.shape[0]} weights")
            if np.any(w <= 0) or not np.all(np.isfinite(w)):
                raise ContractViolation("weights must be positive and finite")
            if abs(w.sum() - 1.0) > WEIGHT_TOL:
                raise ContractViolation(f"weights sum to {w.sum()!r}, not 1")
        if validate and not np.all(np.isfinite(X)):
            raise ContractViolation("positions must be finite")
        for arr in (X, L, w):
            arr.setflags(write=False)
        self.positions = X
        self.labels = L
        self.weights = w
        self._key = None

    @classmethod
    def from_agents(cls, agents, weights=None):
        """Build a measure from a list of :class:`AgentState`."""
        agents = list(agents)
        if not agents:
            raise ContractViolation("an empirical measure needs at least one agent")
        X = np.stack([a.x for a in agents])
        L = np.stack([a.lam for a in agents])
        return cls(X, L, weights)

    @property
    def N(self):
        return self.positions.shape[0]

    @property
    def d(self):
        return self.positions.shape[1]

    @property
    def n(self):
        return self.labels.shape[1]

    @property
    def agents(self):
        return [AgentState(x, lam) for x, lam in zip(self.positions, self.labels)]

    def __len__(self):
        return self.N

    def __repr__(self):
        return f"EmpiricalMeasure(N={self.N}, d={self.d}, n={self.n})"

    def with_labels(self, labels, *, validate=True):
        """Same positions and weights, new labels."""
        return EmpiricalMeasure(self.positions, labels, self.weights, validate=validate)

    def with_positions(self, positions):
        """Same labels and weights, new positions."""
        return EmpiricalMeasure(positions, self.labels, self.weights, validate=False)

    def barycenter(self):
        """Weighted mean position."""
        return self.weights @ self.positions

    def has_uniform_weights(self):
        return bool(np.all(self.weights == self.weights[0]))

    def cache_key(self):
        if self._key is None:
            h = hashlib.blake2b(digest_size=16)
            for arr in (self.positions, self.labels, self.weights):
                h.update(np.ascontiguousarray(arr).tobytes())
                h.update(str(arr.shape).encode())
            self._key = h.digest()
        return self._key


def _space_for(psi, space):
    if space is None:
        return discrete_space(psi.n)
    if space.n != psi.n:
        raise ContractViolation(f"measure has n={psi.n} labels, space has n={space.n}")
    return space


def state_norms(psi, space=None):
    """``|x_a| + ||lam_a||_BL`` for every agent."""
    space = _space_for(psi, space)
    return np.linalg.norm(psi.positions, axis=1) + space.bl_norms(psi.labels)


def first_moment(psi, space=None):
    """First moment ``sum_a w_a (|x_a| + ||lam_a||_BL)``."""
    return float(psi.weights @ state_norms(psi, space))


def support_radius(psi, space=None):
    """Largest ``|x_a| + ||lam_a||_BL`` over the agents."""
    return float(np.max(state_norms(psi, space)))


_COST_CACHE: OrderedDict = OrderedDict()
_COST_CACHE_SIZE = 64


def cost_matrix(psi1, psi2, space=None):
    """Ground costs ``|x_a - x_b| + ||lam_a - lam_b||_BL`` between two clouds.

    Results are memoized per (measure, measure, metric) triple.
    """
    space = _space_for(psi1, space)
    if psi1.d != psi2.d or psi1.n != psi2.n:
        raise ContractViolation(
            f"dimension mismatch: (d={psi1.d}, n={psi1.n}) vs (d={psi2.d}, n={psi2.n})"
        )
    key = (psi1.cache_key(), psi2.cache_key(), space.dist.tobytes())
    cached = _COST_CACHE.get(key)
    if cached is not None:
        _COST_CACHE.move_to_end(key)
        return cached
    dx = np.linalg.norm(psi1.positions[:, None, :] - psi2.positions[None, :, :], axis=-1)
    dl = space.bl_norms(psi1.labels[:, None, :] - psi2.labels[None, :, :])
    C = dx + dl
    C.setflags(write=False)
    _COST_CACHE[key] = C
    if len(_COST_CACHE) > _COST_CACHE_SIZE:
        _COST_CACHE.popitem(last=False)
    return C


def wasserstein1(psi1, psi2, space=None):
    """Exact Wasserstein-1 distance between two empirical measures.

    Equal-size clouds with uniform weights are solved as an assignment
    problem (an optimal plan exists among permutations); anything else goes
    through the transport linear program.

    Parameters
    ----------
    psi1, psi2 : EmpiricalMeasure
    space : LabelMetricSpace, optional
        Metric on labels; discrete by default.

    Returns
    -------
    float
    """
    C = cost_matrix(psi1, psi2, space)
    if psi1.N == psi2.N and psi1.has_uniform_weights() and psi2.has_uniform_weights():
        rows, cols = linear_sum_assignment(C)
        return float(C[rows, cols].sum() / psi1.N)
    return float(_transport_lp(psi1.weights, psi2.weights, C))


def _transport_lp(a, b, C):
    n1, n2 = C.shape
    # row marginals then column marginals; one redundant equality is harmless for HiGHS
    rows = np.repeat(np.arange(n1), n2)
    cols = np.tile(np.arange(n2), n1)
    A_rows = coo_matrix((np.ones(n1 * n2), (rows, np.arange(n1 * n2))), shape=(n1, n1 * n2))
    A_cols = coo_matrix((np.ones(n1 * n2), (cols, np.arange(n1 * n2))), shape=(n2, n1 * n2))
    A_eq = vstack([A_rows, A_cols]).tocsr()
    b_eq = np.concatenate([a, b])
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:  # pragma: no cover
        raise RuntimeError(f"transport LP failed: {res.message}")
    return max(res.fun, 0.0)


def push_forward(psi, f):
    """Image of ``psi`` under a map ``f: AgentState -> AgentState``; weights are kept."""
    agents = [f(a) for a in psi.agents]
    for i, a in enumerate(agents):
        if not isinstance(a, AgentState):
            agents[i] = AgentState(*a)
    X = np.stack([a.x for a in agents])
    L = np.stack([a.lam for a in agents])
    return EmpiricalMeasure(X, L, psi.weights)
