"""Riemannian geometry of a reversible Markov chain on the probability simplex.

For a reversible rate matrix ``Q`` with stationary law ``sigma`` the relative
entropy ``E(lam) = sum_h lam_h log(lam_h / sigma_h)`` has gradient flow
``lam' = Q lam`` with respect to the metric ``G = K^+`` built from the
Onsager matrix

    K(lam) = sum_{h<l} Q[h, l] sigma_l Phi(lam_h/sigma_h, lam_l/sigma_l) (e_h - e_l)(e_h - e_l)^T

where ``Phi`` is the logarithmic mean.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import minimize

from .errors import (
    ContractViolation,
    GeodesicFailure,
    NearSingularMetricError,
    NonUniqueStationaryError,
    NotReversibleError,
)
from .fields import check_rate_matrix

BALANCE_TOL = 1e-8
BOUNDARY_TOL = 1e-12
SERIES_GAP = 1e-6


def zero_sum_basis(n):
    """Orthonormal basis of the zero-sum hyperplane as columns of an ``(n, n-1)`` array."""
    return null_space(np.ones((1, n)))


def stationary_distribution(Q):
    """Unique stationary law of an irreducible reversible rate matrix.

    Parameters
    ----------
    Q : array_like, shape (n, n)
        Columns sum to zero; ``Q[l, h]`` is the rate from ``h`` to ``l``.

    Returns
    -------
    ndarray, shape (n,)

    Raises
    ------
    NonUniqueStationaryError
        If the null space of ``Q`` is not one-dimensional.
    NotReversibleError
        If detailed balance ``Q[h, l] sigma_l = Q[l, h] sigma_h`` fails by more than 1e-8.
    """
    Q = check_rate_matrix(np.array(Q, dtype=float))
    scale = max(1.0, float(np.abs(Q).max()))
    kernel = null_space(Q / scale, rcond=1e-12)
    if kernel.shape[1] != 1:
        raise NonUniqueStationaryError(f"rate matrix has a {kernel.shape[1]}-dimensional null space")
    sigma = kernel[:, 0]
    sigma = sigma / sigma.sum()
    if np.any(sigma <= 0):
        raise NonUniqueStationaryError("stationary vector is not strictly positive")
    flux = Q * sigma[None, :]
    imbalance = np.abs(flux - flux.T).max(initial=0.0)
    if imbalance > BALANCE_TOL * scale:
        raise NotReversibleError(f"detailed balance fails by {imbalance:.3e}")
    return sigma


def _gap(a, b):
    s = a + b
    return np.divide(a - b, s, out=np.zeros_like(s), where=s > 0), 0.5 * s


def log_mean(a, b):
    """Logarithmic mean ``(a - b) / (log a - log b)``, with ``Phi(a, a) = a`` and ``Phi(a, 0) = 0``.

    Written as ``s * eps / artanh(eps)`` with ``s = (a + b)/2`` and
    ``eps = (a - b)/(a + b)``, which stays accurate for nearby arguments; a
    series is used when ``|eps| < 1e-6``.
    """
    a_arr = np.asarray(a, dtype=float)
    b_arr = np.asarray(b, dtype=float)
    if np.any(a_arr < 0) or np.any(b_arr < 0):
        raise ContractViolation("logarithmic mean needs nonnegative arguments")
    a_arr, b_arr = np.broadcast_arrays(a_arr, b_arr)
    eps, s = _gap(a_arr, b_arr)
    small = np.abs(eps) < SERIES_GAP
    edge = (a_arr == 0) | (b_arr == 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(small | edge, 1.0, eps / np.arctanh(np.where(small | edge, 0.5, eps)))
    ratio = np.where(small, 1.0 - eps * eps / 3.0, ratio)
    out = np.where(edge, 0.0, s * ratio)
    return float(out) if out.ndim == 0 else out


def log_mean_grad(a, b):
    """Partial derivative of the logarithmic mean in its first argument (``a, b > 0``)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    eps, s = _gap(a, b)
    small = np.abs(eps) < 1e-3
    e = np.where(small, 0.5, eps)
    at = np.arctanh(e)
    g = np.where(small, 1 - eps**2 / 3 - 4 * eps**4 / 45, e / at)
    dg = np.where(small, -2 * eps / 3 - 16 * eps**3 / 45 - 88 * eps**5 / 315,
                  (at - e / (1 - e * e)) / (at * at))
    return 0.5 * g + dg * b / (2.0 * s)


class MarkovGeometry:
    """Entropy, Onsager matrix and metric attached to a fixed reversible ``Q``.

    Parameters
    ----------
    Q : array_like, shape (n, n)
    sigma : array_like, optional
        Stationary law; computed when omitted and checked otherwise.
    """

    def __init__(self, Q, sigma=None):
        Q = check_rate_matrix(np.array(Q, dtype=float))
        if sigma is None:
            sigma = stationary_distribution(Q)
        else:
            sigma = np.array(sigma, dtype=float)
            flux = Q * sigma[None, :]
            if np.any(sigma <= 0) or abs(sigma.sum() - 1) > 1e-12 or np.abs(flux - flux.T).max() > 1e-10:
                raise NotReversibleError("sigma is not a detailed-balance stationary law of Q")
        Q.setflags(write=False)
        sigma.setflags(write=False)
        self.Q = Q
        self.sigma = sigma
        self.n = Q.shape[0]
        iu = np.triu_indices(self.n, 1)
        w = Q[iu] * sigma[iu[1]]
        keep = w > 0
        self._pairs = (iu[0][keep], iu[1][keep])
        self._pair_weights = w[keep]
        self.basis = zero_sum_basis(self.n)

    def __repr__(self):
        return f"MarkovGeometry(n={self.n}, sigma={np.round(self.sigma, 6).tolist()})"

    @cached_property
    def edge_weights(self):
        """Symmetric matrix ``W[h, l] = Q[h, l] sigma_l``."""
        W = np.zeros((self.n, self.n))
        h, l = self._pairs
        W[h, l] = W[l, h] = self._pair_weights
        return W


def entropy(lam, geom):
    """Relative entropy ``sum_h lam_h log(lam_h / sigma_h)`` with ``0 log 0 = 0``."""
    lam = np.asarray(lam, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(lam > 0, lam * np.log(lam / geom.sigma), 0.0)
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def entropy_gradient(lam, geom):
    """Euclidean gradient ``log(lam / sigma) + 1`` (interior points only)."""
    return np.log(np.asarray(lam, dtype=float) / geom.sigma) + 1.0


def _edge_means(lam, geom):
    h, l = geom._pairs
    rho = np.asarray(lam, dtype=float) / geom.sigma
    return log_mean(rho[..., h], rho[..., l])


def onsager_matrix(lam, geom):
    """Onsager matrix ``K(lam)``; broadcasts over leading axes of ``lam``."""
    lam = np.asarray(lam, dtype=float)
    h, l = geom._pairs
    c = geom._pair_weights * np.asarray(_edge_means(lam, geom))
    K = np.zeros(lam.shape[:-1] + (geom.n, geom.n))
    for j in range(h.size):
        cj = c[..., j]
        K[..., h[j], h[j]] += cj
        K[..., l[j], l[j]] += cj
        K[..., h[j], l[j]] -= cj
        K[..., l[j], h[j]] -= cj
    return K


def metric_tensor(lam, geom):
    """Metric ``G(lam)``: the inverse of ``K(lam)`` on the zero-sum hyperplane.

    ``G`` maps into the hyperplane and annihilates constants, so
    ``G K mu = mu`` for every zero-sum ``mu``.

    Raises
    ------
    NearSingularMetricError
        If a component of ``lam`` is within 1e-12 of zero.
    """
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= BOUNDARY_TOL):
        raise NearSingularMetricError(f"metric requested at a near-boundary point (min component {lam.min():.3e})")
    B = geom.basis
    Kr = np.swapaxes(B, 0, 1) @ onsager_matrix(lam, geom) @ B
    return B @ np.linalg.inv(Kr) @ B.T


def metric_norm(mu, lam, geom):
    """``sqrt(<G(lam) mu, mu>)``."""
    mu = np.asarray(mu, dtype=float)
    G = metric_tensor(lam, geom)
    return float(np.sqrt(max(mu @ G @ mu, 0.0)))


# --------------------------------------------------------------------------- geodesics


@dataclass(frozen=True)
class GeodesicPath:
    """Piecewise-linear path between two labels and its Riemannian length."""

    nodes: np.ndarray
    length: float
    segments: int
    converged: bool = True


SIMPSON = np.array([1.0, 4.0, 1.0]) / 6.0


def _speeds_and_grads(P, D, geom):
    """``sqrt(<G(P) D, D>)`` for stacked points and vectors, with gradients in ``P`` and ``D``."""
    G = metric_tensor(P, geom)
    z = np.einsum("...ij,...j->...i", G, D)
    ell = np.sqrt(np.clip(np.sum(z * D, axis=-1), 1e-300, None))
    d_D = z / ell[..., None]
    # d ell / d P_h = -(1/(2 ell)) sum_{l != h} W_hl dPhi/da(rho_h, rho_l)/sigma_h (z_h - z_l)^2
    rho = P / geom.sigma
    W = geom.edge_weights
    dz2 = (z[..., :, None] - z[..., None, :]) ** 2
    a = np.broadcast_to(rho[..., :, None], dz2.shape)
    b = np.broadcast_to(rho[..., None, :], dz2.shape)
    dphi = log_mean_grad(a, b)
    d_P = -(np.sum(W * dphi * dz2, axis=-1) / geom.sigma) / (2.0 * ell[..., None])
    return ell, d_P, d_D


def path_length(nodes, geom, with_grad=False):
    """Length of a polygonal path, Simpson's rule on every segment.

    Returns the length, and with ``with_grad`` also its gradient with
    respect to every node.
    """
    nodes = np.asarray(nodes, dtype=float)
    A, B = nodes[:-1], nodes[1:]
    D = B - A
    pts = np.stack([A, 0.5 * (A + B), B])  # (3, m, n)
    ell, d_P, d_D = _speeds_and_grads(pts, np.broadcast_to(D, pts.shape), geom)
    length = float(np.sum(SIMPSON[:, None] * ell))
    if not with_grad:
        return length
    wP = SIMPSON[:, None, None] * d_P
    wD = np.sum(SIMPSON[:, None, None] * d_D, axis=0)
    gA = wP[0] + 0.5 * wP[1] - wD
    gB = wP[2] + 0.5 * wP[1] + wD
    grad = np.zeros_like(nodes)
    grad[:-1] += gA
    grad[1:] += gB
    return length, grad


def _optimize_path(lam1, lam2, geom, m, init=None, tol=1e-8):
    B = geom.basis
    straight = lam1[None, :] + np.linspace(0.0, 1.0, m + 1)[:, None] * (lam2 - lam1)[None, :]
    base = straight[1:-1]
    c0 = np.zeros((m - 1, geom.n - 1)) if init is None else (init[1:-1] - base) @ B
    penalty = 1e6

    def unpack(c):
        nodes = straight.copy()
        nodes[1:-1] = base + c.reshape(m - 1, geom.n - 1) @ B.T
        return nodes

    def fun(c):
        nodes = unpack(c)
        if np.any(nodes <= BOUNDARY_TOL * 10):
            return penalty, np.zeros_like(c)
        L, g = path_length(nodes, geom, with_grad=True)
        return L, (g[1:-1] @ B).ravel()

    res = minimize(fun, c0.ravel(), jac=True, method="L-BFGS-B",
                   options={"ftol": 1e-15, "gtol": tol * 1e-2, "maxiter": 20_000, "maxcor": 30})
    nodes = unpack(res.x)
    if np.any(nodes <= 0) or res.fun >= penalty:
        raise GeodesicFailure("geodesic path left the simplex")
    return nodes, float(res.fun), bool(res.success or res.status == 2)


def _resample(nodes, m):
    """Polygon with ``m`` segments interpolating ``nodes`` at uniform parameter values."""
    t_old = np.linspace(0.0, 1.0, nodes.shape[0])
    t_new = np.linspace(0.0, 1.0, m + 1)
    return np.stack([np.interp(t_new, t_old, nodes[:, j]) for j in range(nodes.shape[1])], axis=1)


def geodesic_distance(lam1, lam2, geom, m=None, *, rel_tol=1e-7, max_segments=512):
    """Geodesic distance between two interior labels.

    Minimizes the length of a polygonal path over its interior nodes by
    L-BFGS. Paths are refined coarse-to-fine from an 8-segment straight
    start, each level warm-started from the previous one. With ``m`` given
    the final number of segments is ``m``; otherwise refinement continues
    past 64 segments until the length changes by less than ``rel_tol``
    relative (or ``max_segments`` is reached).

    Returns
    -------
    GeodesicPath
    """
    lam1 = np.asarray(lam1, dtype=float)
    lam2 = np.asarray(lam2, dtype=float)
    if np.any(lam1 <= BOUNDARY_TOL) or np.any(lam2 <= BOUNDARY_TOL):
        raise NearSingularMetricError("geodesic endpoints must be strictly inside the simplex")
    if np.array_equal(lam1, lam2):
        return GeodesicPath(np.stack([lam1, lam2]), 0.0, 1)
    if m is not None and m < 2:
        raise ContractViolation("a geodesic needs at least 2 segments")
    final = 64 if m is None else int(m)
    ladder = [min(8, final)]
    while ladder[-1] < final:
        ladder.append(min(2 * ladder[-1], final))
    nodes = None
    length = np.inf
    ok = True
    for seg in ladder:
        init = None if nodes is None else _resample(nodes, seg)
        nodes, length, ok = _optimize_path(lam1, lam2, geom, seg, init=init)
    seg = ladder[-1]
    if m is None:
        while seg < max_segments:
            nodes2, length2, ok = _optimize_path(lam1, lam2, geom, 2 * seg, init=_resample(nodes, 2 * seg))
            change = abs(length2 - length) / max(length2, 1e-300)
            nodes, length, seg = nodes2, length2, 2 * seg
            if change < rel_tol:
                break
    return GeodesicPath(nodes, length, seg, ok)


def _gauss_legendre(order):
    x, w = np.polynomial.legendre.leggauss(order)
    return x, w


_GL_X, _GL_W = _gauss_legendre(20)


def two_state_speed(s, geom):
    """Metric speed ``|d lam / ds|_G`` along ``lam = (s, 1 - s)``."""
    s = np.asarray(s, dtype=float)
    w = geom.Q[0, 1] * geom.sigma[1]
    phi = log_mean(s / geom.sigma[0], (1.0 - s) / geom.sigma[1])
    return 1.0 / np.sqrt(w * np.asarray(phi))


def two_state_distance(s1, s2, geom):
    """Exact geodesic distance for two labels, ``int_{s1}^{s2} speed(s) ds`` (unsigned).

    The segment is split into panels no longer than their distance to the
    simplex boundary and each panel gets 20-point Gauss-Legendre quadrature.
    """
    if geom.n != 2:
        raise ContractViolation("two_state_distance needs a two-label geometry")
    a, b = sorted((float(s1), float(s2)))
    if a <= 0.0 or b >= 1.0:
        raise NearSingularMetricError("two-state distance needs interior endpoints")
    if a == b:
        return 0.0
    edges = [a]
    x = a
    while x < b:
        x = min(x + max(0.5 * min(x, 1.0 - x), 1e-4), b)
        edges.append(x)
    edges = np.array(edges)
    lo, hi = edges[:-1, None], edges[1:, None]
    pts = 0.5 * (hi - lo) * _GL_X[None, :] + 0.5 * (hi + lo)
    vals = two_state_speed(pts, geom)
    return float(np.sum(0.5 * (hi - lo) * _GL_W[None, :] * vals))


# --------------------------------------------------------------------------- constants


@dataclass(frozen=True)
class GeometryConstants:
    """Sampled bounds of the metric on the simplex and on its ``delta`` interior."""

    delta: float
    c1: float
    c2: float
    c3: float
    c4: float
    L_G: float
    L_E: float
    C_E: float
    alpha: float

    @property
    def m1(self):
        return float(np.sqrt(self.c1))

    @property
    def m2(self):
        return float(np.sqrt(self.c3))

    @property
    def m3(self):
        return float(np.sqrt(self.L_G))

    @property
    def m4(self):
        return float(np.sqrt(self.L_G) * (self.c3 / self.c1) ** 0.75)


def _interior_samples(rng, count, n, delta):
    raw = np.vstack([rng.dirichlet(np.ones(n), size=count // 2),
                     rng.dirichlet(np.full(n, 0.2), size=count - count // 2)])
    verts = np.full((n, n), delta) + (1 - n * delta) * np.eye(n)
    return np.vstack([verts, delta + (1 - n * delta) * raw])


def _plane_eigs(lam, geom):
    B = geom.basis
    Kr = B.T @ onsager_matrix(lam, geom) @ B
    return np.linalg.eigvalsh(Kr)


def probe_constants(geom, delta=0.01, samples=10_000, alpha=0.5, rng=None):
    """Estimate the geometry constants by sampling.

    ``c2`` and ``c1 = 1/c2`` come from the largest eigenvalue of ``K`` on
    the zero-sum plane over the whole simplex; ``c4`` and ``c3 = 1/c4`` from
    the smallest over labels with every component at least ``delta``.
    ``L_G``, ``L_E`` and ``C_E`` are difference quotients of ``G``, of the
    entropy and of its ``alpha``-Holder quotient over sampled pairs.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    n = geom.n
    full = _interior_samples(rng, samples, n, 1e-9)
    inner = _interior_samples(rng, samples, n, delta)
    c2 = float(_plane_eigs(full, geom).max())
    c4 = float(_plane_eigs(inner, geom).min())
    # Lipschitz quotients on nearby and far pairs inside the delta interior
    m = samples // 2
    i, j = rng.integers(0, inner.shape[0], size=(2, m))
    near = inner[i] + 1e-3 * (inner[j] - inner[i])
    pairs_a = np.vstack([inner[i], inner[i]])
    pairs_b = np.vstack([inner[j], near])
    dist = np.linalg.norm(pairs_a - pairs_b, axis=1)
    ok = dist > 1e-14
    Ga, Gb = metric_tensor(pairs_a[ok], geom), metric_tensor(pairs_b[ok], geom)
    L_G = float(np.max(np.linalg.norm(Ga - Gb, ord=2, axis=(1, 2)) / dist[ok]))
    grad = entropy_gradient(inner, geom)
    grad -= grad.mean(axis=1, keepdims=True)
    L_E = float(np.linalg.norm(grad, axis=1).max())
    fa, fb = full[i], full[j]
    dfull = np.linalg.norm(fa - fb, axis=1)
    okf = dfull > 1e-14
    C_E = float(np.max(np.abs(entropy(fa[okf], geom) - entropy(fb[okf], geom)) / dfull[okf] ** alpha))
    return GeometryConstants(delta, 1.0 / c2, c2, 1.0 / c4, c4, L_G, L_E, C_E, alpha)
