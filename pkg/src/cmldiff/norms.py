"""Kernel norms, graph length of site sets and exponential decay fits.

The weighted norm here is the two-point simplification: no decomposition of
the kernel into localized pieces and no large-field weights, so

    ||b||_lambda = sup_v sum_u ||b||_{u,v} exp(lambda * |u - v|_1)

with ``||b||_{u,v}`` the sup of ``|b(x, y)|`` over the unit cells ``u``, ``v``.
"""
from __future__ import annotations

import itertools
import warnings
from typing import NamedTuple, Sequence

import numpy as np
from scipy.sparse.csgraph import minimum_spanning_tree

EXACT_TAU_MAX = 6


class TauBoundWarning(UserWarning):
    """The graph length is a spanning-tree upper bound, not the exact minimum."""


class TauResult(NamedTuple):
    value: int
    exact: bool


def _as_points(points) -> np.ndarray:
    pts = np.unique(np.atleast_2d(np.asarray(points, dtype=np.int64)), axis=0)
    if pts.size == 0:
        raise ValueError("tau needs a nonempty site set")
    return pts


def _l1(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a[:, None, :] - b[None, :, :]).sum(axis=-1)


def mst_length(points) -> int:
    """Rectilinear minimum spanning tree length, an upper bound on tau."""
    pts = _as_points(points)
    if len(pts) == 1:
        return 0
    # zero-length edges vanish in the sparse graph; points are unique so all are >= 1
    return int(round(minimum_spanning_tree(_l1(pts, pts).astype(float)).sum()))


def _steiner_exact(pts: np.ndarray) -> int:
    """Dreyfus-Wagner over the Hanan grid with the l1 metric.

    Some minimal rectilinear Steiner tree has all its Steiner points on the
    Hanan grid, and l1 is the shortest-path metric of the lattice, so the
    dynamic program over the complete Hanan graph is exact.
    """
    k, d = pts.shape
    axes = [np.unique(pts[:, mu]) for mu in range(d)]
    hanan = np.array(list(itertools.product(*axes)), dtype=np.int64)
    dist = _l1(hanan, hanan).astype(float)
    n = len(hanan)
    term = [int(np.flatnonzero((hanan == p).all(axis=1))[0]) for p in pts]
    full = (1 << k) - 1
    dp = np.full((1 << k, n), np.inf)
    for i, t in enumerate(term):
        dp[1 << i] = dist[t]
    for S in range(1, full + 1):
        if S & (S - 1) == 0:
            continue
        best = np.full(n, np.inf)
        sub = (S - 1) & S
        while sub:
            if sub < (S ^ sub):  # each unordered split once
                np.minimum(best, dp[sub] + dp[S ^ sub], out=best)
            sub = (sub - 1) & S
        dp[S] = (best[:, None] + dist).min(axis=0)
    return int(round(dp[full].min()))


def tau_result(points, exact_max: int = EXACT_TAU_MAX) -> TauResult:
    """Minimal number of nearest-neighbour edges of a connected graph containing ``points``."""
    pts = _as_points(points)
    if len(pts) == 1:
        return TauResult(0, True)
    if len(pts) <= exact_max:
        return TauResult(_steiner_exact(pts), True)
    return TauResult(mst_length(pts), False)


def tau(points, exact_max: int = EXACT_TAU_MAX) -> int:
    res = tau_result(points, exact_max)
    if not res.exact:
        warnings.warn(f"tau of {len(_as_points(points))} sites is a spanning-tree upper bound", TauBoundWarning)
    return res.value


def cell_norm(b: np.ndarray, shape: Sequence[int], cell: int = 1) -> np.ndarray:
    """Cell sup-norms ``||b||_{u,v} = sup_{x in u, y in v} |b(x, y)|``.

    ``b`` is a dense ``(N, N)`` kernel on a periodic box of ``shape`` (sites
    flattened in C order). Cells are cubes of ``cell`` sites per axis.
    Returns an ``(Nc, Nc)`` array over cells.
    """
    shape = tuple(shape)
    d = len(shape)
    if any(s % cell for s in shape):
        raise ValueError("cell size must divide the box")
    cshape = tuple(s // cell for s in shape)
    B = np.abs(np.asarray(b, dtype=float)).reshape(shape + shape)
    split = []
    for s in cshape:
        split += [s, cell]
    B = B.reshape(tuple(split) * 2)
    # reduce the intra-cell axes of both x and y
    intra = tuple(2 * i + 1 for i in range(d)) + tuple(2 * d + 2 * i + 1 for i in range(d))
    return B.max(axis=intra).reshape(int(np.prod(cshape)), int(np.prod(cshape)))


def _cell_distances(cshape: Sequence[int]) -> np.ndarray:
    idx = np.array(np.unravel_index(np.arange(int(np.prod(cshape))), cshape)).T
    diff = np.abs(idx[:, None, :] - idx[None, :, :])
    sides = np.array(cshape)
    return np.minimum(diff, sides - diff).sum(axis=-1)


def weighted_kernel_norm_simplified(b: np.ndarray, shape: Sequence[int], lam: float,
                                    mode: str = "two_point", cell: int = 1) -> float:
    """Simplified exponentially weighted kernel norm of a dense kernel.

    ``mode`` is ``"two_point"`` (weight ``|u - v|_1``) or ``"tau"`` (weight
    ``tau({u, v})``); the two coincide for pairs and both are kept so callers
    can name the intent. Distances use the periodic minimum image.
    """
    if mode not in ("two_point", "tau"):
        raise ValueError(f"unknown mode {mode!r}")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    cn = cell_norm(b, shape, cell)
    cshape = tuple(s // cell for s in shape)
    weight = np.exp(lam * _cell_distances(cshape))
    return float((cn * weight).sum(axis=0).max())


weighted_kernel_norm = weighted_kernel_norm_simplified


def stencil_kernel_norm(stencil: np.ndarray, lam: float) -> float:
    """Same norm for a nearest-neighbour kernel in column-stencil form.

    ``stencil[j, y] = b(y + offsets[j], y)`` with offsets ordered origin,
    ``+e_1, -e_1, ...``; at cell size 1 every entry is its own cell.
    """
    s = np.abs(np.asarray(stencil, dtype=float))
    col = s[0] + np.exp(lam) * s[1:].sum(axis=0)
    return float(col.max())


class DecayFit(NamedTuple):
    C: float
    m: float
    m_stderr: float
    residual: float
    decays: bool

    def m_lower(self, z: float = 1.96) -> float:
        return self.m - z * self.m_stderr


def decay_rate_fit(distances, values, sigma=None) -> DecayFit:
    """Fit ``values ~ C exp(-m r)`` by (weighted) least squares on logs.

    Only positive values enter the fit. ``sigma`` are absolute errors of
    ``values``; they become log-space weights ``values / sigma``.
    All-zero input returns ``m = inf`` (vacuous decay).
    """
    r = np.asarray(distances, dtype=float)
    v = np.asarray(values, dtype=float)
    if r.shape != v.shape:
        raise ValueError("distances and values must have the same length")
    if np.all(v == 0):
        return DecayFit(0.0, np.inf, 0.0, 0.0, True)
    keep = v > 0
    if len(np.unique(r[keep])) < 3:
        raise ValueError("need at least 3 distinct distances with positive values")
    r, v = r[keep], v[keep]
    y = np.log(v)
    if sigma is None:
        w = np.ones_like(y)
    else:
        s = np.asarray(sigma, dtype=float)[keep]
        w = v / np.maximum(s, np.finfo(float).tiny)
    A = np.stack([np.ones_like(r), -r], axis=1) * w[:, None]
    coef, *_ = np.linalg.lstsq(A, y * w, rcond=None)
    resid = y * w - A @ coef
    dof = max(len(y) - 2, 1)
    s2 = float(resid @ resid) / dof
    if sigma is not None:
        # absolute weights: the parameter covariance is (A^T A)^-1, inflated if chi2/dof > 1
        s2 = max(s2, 1.0)
    cov = s2 * np.linalg.inv(A.T @ A)
    m = float(coef[1])
    return DecayFit(float(np.exp(coef[0])), m, float(np.sqrt(cov[1, 1])),
                    float(np.sqrt((resid @ resid) / len(y))), m > 0)
