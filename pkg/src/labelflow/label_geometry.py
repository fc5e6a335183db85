"""Norms and distances for measures on a finite label set.

Labels are indexed ``0..n-1``. A probability vector over labels is a point of
the simplex; a signed measure is any real vector of length ``n``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations, product

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import HalfspaceIntersection

from .errors import ContractViolation, InvalidLabelError

RENORMALIZE_TOL = 1e-9
NEGATIVE_TOL = 1e-12


class LabelMetricSpace:
    """A finite metric space of ``n`` labels.

    Parameters
    ----------
    n : int
        Number of labels.
    dist : array_like, optional
        Symmetric ``(n, n)`` distance matrix with zero diagonal. Defaults to
        the discrete metric (1 between any two distinct labels).
    """

    def __init__(self, n, dist=None):
        n = int(n)
        if n < 1:
            raise ContractViolation(f"label count must be positive, got {n}")
        if dist is None:
            dist = np.ones((n, n)) - np.eye(n)
        dist = np.array(dist, dtype=float)
        if dist.shape != (n, n):
            raise ContractViolation(f"distance matrix must be {n}x{n}, got {dist.shape}")
        if not np.all(np.isfinite(dist)):
            raise ContractViolation("distance matrix has non-finite entries")
        if np.any(np.diag(dist) != 0):
            raise ContractViolation("distance matrix must have a zero diagonal")
        if not np.allclose(dist, dist.T, rtol=0, atol=1e-12):
            raise ContractViolation("distance matrix must be symmetric")
        off = dist[~np.eye(n, dtype=bool)]
        if np.any(off <= 0):
            raise ContractViolation("distinct labels must be at positive distance")
        # triangle inequality: d[h,l] <= d[h,m] + d[m,l]
        via = dist[:, :, None] + dist[None, :, :]
        if np.any(dist[:, None, :] > via + 1e-12):
            raise ContractViolation("distance matrix violates the triangle inequality")
        dist.setflags(write=False)
        self.n = n
        self.dist = dist
        self._vertices = None

    @classmethod
    def discrete(cls, n):
        """Discrete metric on ``n`` labels."""
        return cls(n)

    def __repr__(self):
        return f"LabelMetricSpace(n={self.n})"

    def dual_ball_vertices(self):
        """Vertices of the unit ball of the BL dual norm.

        The BL norm of ``mu`` is the maximum of ``V @ mu`` over these
        vertices ``V``, which lets many norms be evaluated at once.
        """
        if self._vertices is None:
            self._vertices = _enumerate_dual_vertices(self)
        return self._vertices

    def bl_norms(self, mus):
        """BL norms of the rows of ``mus`` (any leading shape, last axis ``n``)."""
        mus = np.asarray(mus, dtype=float)
        if mus.shape[-1] != self.n:
            raise ContractViolation(f"expected last axis {self.n}, got {mus.shape}")
        vertices = self.dual_ball_vertices()
        return np.max(mus @ vertices.T, axis=-1).clip(min=0.0)


@lru_cache(maxsize=None)
def discrete_space(n):
    """Shared discrete-metric space on ``n`` labels (vertex enumeration is cached)."""
    return LabelMetricSpace(n)


def _dual_constraints(space):
    """Rows ``a`` with ``a @ phi <= 1`` describing ``|phi|_inf + Lip(phi) <= 1``."""
    n = space.n
    rows = []
    pairs = list(combinations(range(n), 2))
    if not pairs:
        return np.array([[1.0], [-1.0]])
    for h in range(n):
        for (l, m) in pairs:
            for s1, s2 in product((1.0, -1.0), repeat=2):
                a = np.zeros(n)
                a[h] += s1
                a[l] += s2 / space.dist[l, m]
                a[m] -= s2 / space.dist[l, m]
                rows.append(a)
    return np.unique(np.round(np.array(rows), 15), axis=0)


def _enumerate_dual_vertices(space):
    n = space.n
    A = _dual_constraints(space)
    if n == 1:
        return np.array([[1.0], [-1.0]])
    halfspaces = np.hstack([A, -np.ones((A.shape[0], 1))])
    hs = HalfspaceIntersection(halfspaces, np.zeros(n))
    verts = hs.intersections
    # degenerate facets produce near-duplicate copies of the same vertex
    _, keep = np.unique(np.round(verts, 9), axis=0, return_index=True)
    return verts[np.sort(keep)]


def tv_norm(mu):
    """Total variation norm: sum of absolute components."""
    return float(np.sum(np.abs(np.asarray(mu, dtype=float))))


def bl_norm(mu, space):
    """Bounded-Lipschitz norm of a signed label measure.

    Solves the linear program

        max  sum_h phi_h mu_h
        s.t. |phi_h| <= a,  |phi_h - phi_l| <= L d(h, l),  a + L <= 1

    which is the dual unit ball ``|phi|_inf + Lip(phi) <= 1``.

    Parameters
    ----------
    mu : array_like, shape (n,)
    space : LabelMetricSpace

    Returns
    -------
    float
    """
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (space.n,):
        raise ContractViolation(f"measure has shape {mu.shape}, space has n={space.n}")
    if not np.any(mu):
        return 0.0
    n = space.n
    # variables: phi_0..phi_{n-1}, a, L
    nv = n + 2
    c = np.zeros(nv)
    c[:n] = -mu
    A, b = [], []
    for h in range(n):
        row = np.zeros(nv)
        row[h], row[n] = 1.0, -1.0
        A.append(row)
        row = np.zeros(nv)
        row[h], row[n] = -1.0, -1.0
        A.append(row)
        b += [0.0, 0.0]
    for h, l in combinations(range(n), 2):
        d = space.dist[h, l]
        for s in (1.0, -1.0):
            row = np.zeros(nv)
            row[h], row[l], row[n + 1] = s, -s, -d
            A.append(row)
            b.append(0.0)
    row = np.zeros(nv)
    row[n] = row[n + 1] = 1.0
    A.append(row)
    b.append(1.0)
    bounds = [(None, None)] * n + [(0, None), (0, None)]
    res = linprog(c, A_ub=np.array(A), b_ub=np.array(b), bounds=bounds, method="highs")
    if res.status != 0:  # pragma: no cover - the LP is always feasible and bounded
        raise RuntimeError(f"BL linear program failed: {res.message}")
    return max(0.0, -float(res.fun))


def as_distribution(weights, n=None):
    """Validate a probability vector and return it as a read-only array.

    Sums off by at most ``1e-9`` are renormalized; components in
    ``[-1e-12, 0)`` are clipped to zero. Anything else is rejected.
    """
    w = np.array(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise InvalidLabelError(f"label distribution must be a nonempty vector, got shape {w.shape}")
    if n is not None and w.size != n:
        raise InvalidLabelError(f"label distribution has {w.size} components, expected {n}")
    if not np.all(np.isfinite(w)):
        raise InvalidLabelError("label distribution has non-finite components")
    if np.any(w < -NEGATIVE_TOL):
        raise InvalidLabelError(f"label distribution has negative component {w.min():.3e}")
    w = np.clip(w, 0.0, None)
    s = w.sum()
    if abs(s - 1.0) > RENORMALIZE_TOL:
        raise InvalidLabelError(f"label distribution sums to {s!r}, not 1")
    w = w / s
    w.setflags(write=False)
    return w


@dataclass(frozen=True)
class LabelDistribution:
    """A probability vector over ``n`` labels.

    Construction validates and renormalizes (see :func:`as_distribution`).
    Instances convert to numpy arrays via ``np.asarray``.
    """

    weights: np.ndarray = field()

    def __post_init__(self):
        object.__setattr__(self, "weights", as_distribution(self.weights))

    @property
    def n(self):
        return self.weights.size

    def __array__(self, dtype=None, copy=None):
        return self.weights if dtype is None else self.weights.astype(dtype)

    def __len__(self):
        return self.weights.size


def _pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ContractViolation(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def bhattacharyya(a, b):
    """Affinity ``sum_h sqrt(a_h b_h)``, broadcast over leading axes."""
    a, b = _pair(a, b)
    return np.sum(np.sqrt(np.clip(a, 0, None) * np.clip(b, 0, None)), axis=-1)


def hellinger(a, b):
    """Hellinger distance ``sqrt(sum_h (sqrt(a_h) - sqrt(b_h))**2)``."""
    a, b = _pair(a, b)
    diff = np.sqrt(np.clip(a, 0, None)) - np.sqrt(np.clip(b, 0, None))
    out = np.sqrt(np.sum(diff * diff, axis=-1))
    return float(out) if out.ndim == 0 else out


def spherical_hellinger(a, b):
    """Angle between ``sqrt(a)`` and ``sqrt(b)`` on the unit sphere.

    Equals ``arccos(1 - hellinger(a, b)**2 / 2)``; values lie in ``[0, pi/2]``
    for probability vectors.
    """
    out = np.arccos(np.clip(bhattacharyya(a, b), -1.0, 1.0))
    return float(out) if out.ndim == 0 else out


def spherical_hellinger_literal(a, b):
    """Alternative angle ``sqrt(arccos(1 - hellinger**4 / 2))``.

    Kept only for the ``literal`` distance convention of the replicator
    proximal step; it is not the sphere geodesic.
    """
    h2 = np.asarray(hellinger(a, b)) ** 2
    out = np.sqrt(np.arccos(np.clip(1.0 - 0.5 * h2 * h2, -1.0, 1.0)))
    return float(out) if out.ndim == 0 else out
