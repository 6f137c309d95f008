"""Renormalization-group flow of random-walk kernels.

Conventions. A field at scale ``n`` lives on ``(L^-n Z)^d``; site ``j`` of the
periodic box sits at ``x = (j - origin) L^-n`` and integrals are
``int dx f = L^(-nd) sum_x f(x)``. A kernel at scale ``n`` is stored as its
site-level matrix ``P`` (columns summing to 1); its values in the integral
convention are ``L^(nd) P``. The RG step multiplies ``L^2`` consecutive
kernels and relabels sites at the next scale, so no decimation occurs.
"""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .lattice import CurrentModel, LatticeGeometry, LocalChaoticMap, apply_stencil
from .rwre import EnvironmentKernel, TranslationKernel, iter_environment

BOX_TAIL_Z = 5.0


class BoxSizeError(ValueError):
    """The periodic box is too small for the requested depth of the flow."""


class AperiodicityWarning(UserWarning):
    """``|T_hat(k)| >= 1`` at some ``k != 0``: the flow need not converge."""


def required_box_side(D0: float, L: int, n: int, d: int = 1, z: float = BOX_TAIL_Z) -> int:
    """Smallest box side holding ``z`` standard deviations on each side after ``L^(2n)`` steps.

    The per-axis variance after ``t`` steps is ``D0 t / d``; ``z = 5`` keeps the
    wrapped Gaussian mass below ``1e-6``.
    """
    sigma = math.sqrt(max(D0, 0.0) * L ** (2 * n) / d)
    return max(2, math.ceil(2 * z * sigma))


def check_box(M: int, D0: float, L: int, n: int, d: int = 1) -> None:
    need = required_box_side(D0, L, n, d)
    if M < need:
        raise BoxSizeError(f"box side {M} < {need} needed for L={L}, n={n}, D0={D0:g}")


# ----------------------------------------------------------------------------
# fields

@dataclass(frozen=True)
class ScaledField:
    geometry: LatticeGeometry
    values: np.ndarray
    L: int = 2
    n: int = 0
    origin: tuple[int, ...] | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != self.geometry.shape:
            raise ValueError("field shape does not match geometry")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.origin is None:
            object.__setattr__(self, "origin", (0,) * self.geometry.d)

    @property
    def spacing(self) -> float:
        return float(self.L) ** (-self.n)

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.geometry.d

    def positions(self) -> np.ndarray:
        """Minimum-image coordinates of every site, shape ``(d, *shape)``."""
        return self.geometry.displacement(self.origin) * self.spacing

    def mass(self) -> float:
        return self.cell_volume * math.fsum(self.values.ravel())

    def integrate(self, f: np.ndarray) -> float:
        return self.cell_volume * math.fsum((np.asarray(f) * self.values).ravel())


def scale_field(E: ScaledField, L: int | None = None) -> ScaledField:
    """``(S_L E)(x) = L^d E(L x)`` on the next finer grid; preserves the integral."""
    L = E.L if L is None else L
    if L == 1:
        return E
    if int(L) != L or L < 1:
        raise ValueError(f"scale factor must be a positive integer, got {L}")
    if E.n > 0 and L != E.L:
        raise ValueError(f"field was built with base {E.L}, cannot rescale by {L}")
    if E.geometry.M % L:
        raise ValueError(f"box side {E.geometry.M} is not divisible by {L}")
    d = E.geometry.d
    return ScaledField(E.geometry, E.values * float(L) ** d, int(L), E.n + 1, E.origin)


# ----------------------------------------------------------------------------
# kernels

@dataclass(frozen=True)
class RGKernel:
    """Site-level column-stochastic matrix of a kernel at scale ``n``."""

    geometry: LatticeGeometry
    matrix: np.ndarray
    L: int
    n: int

    def values(self) -> np.ndarray:
        """Kernel values in the integral convention, ``L^(nd) P``."""
        return float(self.L) ** (self.n * self.geometry.d) * self.matrix

    def column_integrals(self) -> np.ndarray:
        """``int dx p(x, y)`` for every ``y``; 1 for a stochastic kernel."""
        return float(self.L) ** (-self.n * self.geometry.d) * self.values().sum(axis=0)


def _as_matrix(k, geometry: LatticeGeometry | None) -> np.ndarray:
    if isinstance(k, RGKernel):
        return k.matrix
    if isinstance(k, EnvironmentKernel):
        if k.t_max != 1:
            raise ValueError("pass single-slice environments or RG kernels")
        return k.dense(0)
    return np.asarray(k, dtype=float)


def rg_kernel_step(kernels: Sequence, L: int, geometry: LatticeGeometry | None = None, n: int | None = None) -> RGKernel:
    """Compose ``L^2`` consecutive kernels ``p_{t_L2} ... p_{t_1}`` and move to the next scale.

    ``kernels`` are :class:`RGKernel`, single-slice :class:`EnvironmentKernel`
    or raw matrices, first time slice first.
    """
    if len(kernels) < L * L:
        raise ValueError(f"need {L * L} time slices, got {len(kernels)}")
    kernels = list(kernels)[: L * L]
    first = kernels[0]
    if geometry is None:
        geometry = getattr(first, "geometry", None)
        if geometry is None:
            raise ValueError("geometry is required for raw matrices")
    if n is None:
        n = first.n if isinstance(first, RGKernel) else 0
    P = _as_matrix(first, geometry)
    for k in kernels[1:]:
        P = _as_matrix(k, geometry) @ P
    return RGKernel(geometry, P, int(L), n + 1)


def circulant(T_box: np.ndarray) -> np.ndarray:
    """Dense matrix ``C[x, y] = T(x - y)`` of a periodic box kernel (sites in C order)."""
    shape = T_box.shape
    N = T_box.size
    coords = np.array(np.unravel_index(np.arange(N), shape))
    diff = (coords[:, :, None] - coords[:, None, :]) % np.array(shape)[:, None, None]
    return T_box[tuple(diff)]


def diffusion_constant(T: TranslationKernel) -> float:
    """``D0 = sum_u |u|^2 T(u)``."""
    u2 = (T.offsets() ** 2).sum(axis=0)
    return math.fsum((u2 * T.values).ravel())


@dataclass(frozen=True)
class FourierKernel:
    """``T_n`` of the pure flow sampled on a band of wavevectors."""

    n: int
    L: int
    D0: float
    k: np.ndarray            # (n_k,) per-axis band grid
    values: np.ndarray       # T_hat_n on the product grid, shape (n_k,)*d
    gauss_sup_dist: float
    box: LatticeGeometry | None = field(default=None, repr=False)
    box_spectrum: np.ndarray | None = field(default=None, repr=False)

    def gaussian(self) -> np.ndarray:
        d = self.values.ndim
        k2 = sum(np.meshgrid(*([self.k**2] * d), indexing="ij"))
        return np.exp(-self.D0 * k2 / (2 * d))

    def position(self) -> np.ndarray:
        """Position-space kernel in the integral convention on the attached box (origin at index 0)."""
        if self.box is None:
            raise ValueError("no box attached; call pure_T_flow with box=...")
        site = np.real(np.fft.ifftn(self.box_spectrum))
        return float(self.L) ** (self.n * self.box.d) * site

    def as_field(self) -> "ScaledField":
        """Site-level probabilities as a scaled field centred at the box origin."""
        site = np.real(np.fft.ifftn(self.box_spectrum))
        return ScaledField(self.box, float(self.L) ** (self.n * self.box.d) * site, self.L, self.n, (0,) * self.box.d)


def _band(n_k: int) -> np.ndarray:
    return np.linspace(-np.pi, np.pi, n_k)


def _default_nk(d: int) -> int:
    return {1: 4097, 2: 257, 3: 65}[d]


def fourier_power(T_hat: np.ndarray, power: int) -> np.ndarray:
    return np.power(np.asarray(T_hat, dtype=complex), power)


def pure_T_flow(T: TranslationKernel, L: int, n: int, box: LatticeGeometry | None = None,
                n_k: int | None = None, D0: float | None = None) -> list[FourierKernel]:
    """Deterministic flow ``T_hat_m(k) = T_hat(k / L^m)^(L^(2m))`` for ``m = 1..n``.

    Each entry reports the sup over the band ``|k_mu| <= pi`` of the distance
    to ``exp(-D0 |k|^2 / 2d)``. With ``box`` the exact periodic kernel
    ``T^(L^(2m))`` on that box is attached for position-space access.
    """
    d = T.d
    D0 = diffusion_constant(T) if D0 is None else D0
    n_k = _default_nk(d) if n_k is None else n_k
    kb = _band(n_k)
    kgrid = np.stack(np.meshgrid(*([kb] * d), indexing="ij"), axis=-1)
    check_M = box.M if box is not None else 256
    if T.dual_grid_max(max(check_M, 2 * T.radius + 1)) >= 1.0 - 1e-12:
        warnings.warn("|T_hat(k)| reaches 1 at some k != 0; no convergence guarantee", AperiodicityWarning)
    T_box_hat = np.fft.fftn(T.on_box(box)) if box is not None else None
    out = []
    for m in range(1, n + 1):
        power = L ** (2 * m)
        vals = fourier_power(T.fourier(kgrid / float(L) ** m), power)
        if d == 1:
            vals = vals.reshape(n_k)
        gauss = np.exp(-D0 * (kgrid**2).sum(axis=-1) / (2 * d)).reshape(vals.shape)
        dist = float(np.max(np.abs(vals - gauss)))
        spec = fourier_power(T_box_hat, power) if box is not None else None
        out.append(FourierKernel(m, L, D0, kb, vals, dist, box, spec))
    return out


def position_power(T: TranslationKernel, power: int, box: LatticeGeometry) -> np.ndarray:
    """``T^power`` on the box by repeated direct convolution (test oracle, small powers)."""
    cur = np.zeros(box.shape)
    cur[(0,) * box.d] = 1.0
    for _ in range(power):
        nxt = np.zeros(box.shape)
        for idx in np.ndindex(T.values.shape):
            w = T.values[idx]
            if w:
                off = tuple(i - T.radius for i in idx)
                nxt += w * np.roll(cur, off, axis=tuple(range(box.d)))
        cur = nxt
    return cur


# ----------------------------------------------------------------------------
# linear fluctuation operator

@lru_cache(maxsize=32)
def _box_powers(T_bytes: bytes, shape: tuple, M: int, count: int) -> np.ndarray:
    T = TranslationKernel(np.frombuffer(T_bytes).reshape(shape))
    geo = LatticeGeometry(len(shape), M)
    spec = np.fft.fftn(T.on_box(geo))
    pw = np.empty((count,) + geo.shape)
    cur = np.ones_like(spec)
    for i in range(count):
        pw[i] = np.real(np.fft.ifftn(cur))
        cur = cur * spec
    pw.setflags(write=False)
    return pw


def kernel_powers(T: TranslationKernel, geometry: LatticeGeometry, count: int) -> np.ndarray:
    """``T^0 .. T^(count-1)`` on the box by repeated Fourier multiplication (cached)."""
    return _box_powers(np.ascontiguousarray(T.values).tobytes(), T.values.shape, geometry.M, count)


def _L_weights(T: TranslationKernel, geometry: LatticeGeometry, L: int, x: Sequence[int], y: Sequence[int]) -> np.ndarray:
    """Coefficients ``W[i, j, s]`` with ``(Lb)(x, y) = sum W * b[i, j, s]`` for column-stencil ``b``."""
    d = geometry.d
    pw = kernel_powers(T, geometry, L * L)
    out = np.empty((L * L, len(geometry.offsets)) + geometry.shape)
    # b[i, j, s] = b_i(s + off_j, s); weight T^(L2-i-1)(x - s - off_j) * T^i(s - y)
    for i in range(L * L):
        left = geometry.shift(pw[L * L - 1 - i][tuple(np.ix_(*[(-np.arange(geometry.M)) % geometry.M] * d))], x)
        right = geometry.shift(pw[i], y)
        for j, off in enumerate(geometry.offsets):
            out[i, j] = geometry.neighbour(left, off) * right
    return float(L) ** (d - 1) * out


def linear_L_apply(b: np.ndarray, T: TranslationKernel, L: int, geometry: LatticeGeometry,
                   points: Sequence[tuple[Sequence[int], Sequence[int]]] | None = None) -> np.ndarray:
    """Linearized RG of the fluctuation over one window of ``L^2`` slices.

    ``b`` is in column-stencil form with shape ``(..., L^2, 2d+1, *shape)``:
    ``b[..., i, j, y] = b_i(y + offsets[j], y)``; leading axes are replicas.
    Computes ``sum_i L^(d-1) sum_{x,y} T^(L^2-i-1)(X - x) b_i(x, y) T^i(y - Y)``
    with ``X = L x'``, ``Y = L y'`` given as site indices.

    With ``points`` (a list of ``(X, Y)`` site pairs) returns an array of shape
    ``(..., len(points))``; otherwise the dense coarse kernel over all site
    pairs, shape ``(..., N, N)`` (small boxes only).
    """
    d = geometry.d
    core = (L * L, len(geometry.offsets)) + geometry.shape
    b = np.asarray(b, dtype=float)
    if b.shape[-len(core):] != core:
        if b.ndim >= d + 2 and b.shape[-d - 2] != L * L:
            raise ValueError(f"window has {b.shape[-d - 2]} slices, expected {L * L}")
        raise ValueError(f"b must end with shape {core}, got {b.shape}")
    batch = b.shape[: b.ndim - len(core)]
    flat = b.reshape(batch + (-1,))
    if points is None:
        sites = list(np.ndindex(geometry.shape))
        points = [(X, Y) for X in sites for Y in sites]
        dense = True
    else:
        dense = False
    W = np.stack([_L_weights(T, geometry, L, X, Y).ravel() for X, Y in points], axis=1)
    out = flat @ W
    if dense:
        N = geometry.n_sites
        out = out.reshape(batch + (N, N))
    return out


# ----------------------------------------------------------------------------
# effective diffusion constant

@dataclass(frozen=True)
class EffectiveD:
    D: float
    D_moment: float
    D_fit: float
    uncertainty: float
    ok: bool
    fit_residual: float


def gaussian_density(x2: np.ndarray, D: float, d: int) -> np.ndarray:
    return (d / (2 * np.pi * D)) ** (d / 2) * np.exp(-d * x2 / (2 * D))


def estimate_effective_D(profiles: ScaledField | Sequence[ScaledField], t_effective: float = 1.0,
                         rel_tol: float = 0.25) -> EffectiveD:
    """Diffusion constant of rescaled profiles by second moment and by Gaussian fit.

    The moment estimate is ``E|x - c|^2 / t`` with ``c`` the centre of mass,
    which equals ``D`` for ``T*_D``. The fit minimizes the squared deviation
    from ``mass * T*_D(x - c)`` over ``D``. ``D`` is the moment estimate,
    ``uncertainty`` the spread of the two; ``ok`` is false when they differ by
    more than ``rel_tol`` or the fit leaves more than half the profile's
    norm unexplained.
    """
    if isinstance(profiles, ScaledField):
        profiles = [profiles]
    if not profiles:
        raise ValueError("need at least one profile")
    moments, fits, resids = [], [], []
    for p in profiles:
        mass = p.mass()
        if not np.isfinite(mass) or mass <= 0:
            raise ValueError(f"profile is not normalizable (mass {mass:g})")
        d = p.geometry.d
        x = p.positions()
        c = np.array([p.integrate(x[mu]) / mass for mu in range(d)])
        dx = x - c.reshape((d,) + (1,) * d)
        x2 = (dx**2).sum(axis=0)
        D_mom = p.integrate(x2) / mass / t_effective
        vals = p.values

        def loss(logD):
            g = mass * gaussian_density(x2, math.exp(logD) * t_effective, d)
            return float(((vals - g) ** 2).sum())

        lo = math.log(max(D_mom, 1e-12)) - 5.0
        res = minimize_scalar(loss, bounds=(lo, lo + 10.0), method="bounded",
                              options={"xatol": 1e-12, "maxiter": 500})
        D_fit = math.exp(res.x)
        norm = float((vals**2).sum())
        resid = math.sqrt(res.fun / norm) if norm > 0 else np.inf
        moments.append(D_mom)
        fits.append(D_fit)
        resids.append(resid)
    D_m = float(np.mean(moments))
    D_f = float(np.mean(fits))
    spread = abs(D_m - D_f)
    if len(profiles) > 1:
        spread = max(spread, float(np.std(moments, ddof=1)))
    resid = float(max(resids))
    ok = spread <= rel_tol * D_m and resid <= 0.5
    return EffectiveD(D_m, D_m, D_f, spread, ok, resid)


# ----------------------------------------------------------------------------
# experiment

@dataclass
class RGFlowRecord:
    seed: int
    n: int
    L: int
    D_n: float
    eps_n: float
    gauss_sup_dist: float
    mass_err: float
    in_elliptic_band: bool = True
    kernel: np.ndarray | None = field(default=None, repr=False)

    CSV_COLUMNS = ("seed", "n", "L", "D_n", "eps_n", "gauss_sup_dist", "mass_err")

    def row(self) -> list:
        return [self.seed, self.n, self.L, repr(float(self.D_n)), repr(float(self.eps_n)),
                repr(float(self.gauss_sup_dist)), repr(float(self.mass_err))]


@dataclass
class RGExperimentResult:
    records: list[RGFlowRecord]
    partial: bool = False


def _align_columns(P: np.ndarray, geometry: LatticeGeometry, cols: np.ndarray) -> np.ndarray:
    """``A[u, c] = P[y_c + u, c]`` for every site displacement ``u`` (box order, origin at 0)."""
    d = geometry.d
    coords = np.array(np.unravel_index(cols, geometry.shape))       # (d, C)
    u = np.indices(geometry.shape).reshape(d, -1)                   # (d, N)
    tgt = (coords[:, None, :] + u[:, :, None]) % geometry.M          # (d, N, C)
    flat_tgt = np.ravel_multi_index(tuple(tgt), geometry.shape)
    Pf = P.reshape(geometry.n_sites, -1)
    return Pf[flat_tgt, np.arange(len(cols))[None, :]]


def full_rg_experiment(model: CurrentModel, cmap: LocalChaoticMap, geometry: LatticeGeometry,
                       L: int, n_max: int, rng: np.random.Generator, seed: int = 0,
                       burn_in: int = 64, column_stride: int = 4, window_cells: float = 2.0,
                       deadline: float | None = None, keep_kernels: bool = False) -> RGExperimentResult:
    """Quenched RG flow of the environment kernel for one environment realization.

    Columns ``p_n(., y)`` of the scale-``n`` kernel (the product of the first
    ``L^(2n)`` environment slices) are obtained by evolving point masses at
    every ``column_stride``-th site. Per scale:

    * ``T_n``: the column average aligned on ``y`` (translation invariance),
    * ``eps_n``: RMS of ``p_n - T_n`` in the integral convention over the
      displacements ``|u_mu| <= window_cells`` (rescaled units),
    * ``D_n``: second moment of ``T_n`` in rescaled units,
    * Gaussian sup distance of ``T_hat_n`` over ``|k_mu| <= pi``.
    """
    d = geometry.d
    T0 = TranslationKernel.hopping(d, model.a)
    D0 = diffusion_constant(T0)
    check_box(geometry.M, D0, L, n_max, d)
    cols = np.arange(0, geometry.n_sites, column_stride)
    P = np.zeros(geometry.shape + (len(cols),))
    P.reshape(geometry.n_sites, -1)[cols, np.arange(len(cols))] = 1.0
    env = iter_environment(model, cmap, geometry, rng, burn_in)
    disp = geometry.displacement().reshape(d, -1)
    kb = _band(_default_nk(d))
    kgrid = np.stack(np.meshgrid(*([kb] * d), indexing="ij"), axis=-1).reshape(-1, d)
    gauss = np.exp(-D0 * (kgrid**2).sum(axis=-1) / (2 * d))
    records, t, partial = [], 0, False
    for n in range(1, n_max + 1):
        target = L ** (2 * n)
        while t < target:
            P = apply_stencil(next(env), P, geometry)
            t += 1
            if deadline is not None and t % 256 == 0 and time.monotonic() > deadline:
                partial = True
                break
        if partial:
            break
        A = _align_columns(P, geometry, cols)                         # (N, C) site probabilities
        Tn = A.mean(axis=1)
        scale = float(L) ** n
        x = disp / scale
        window = np.all(np.abs(x) <= window_cells, axis=0)
        delta = (A[window] - Tn[window, None]) * scale**d
        eps_n = float(np.sqrt(np.mean(delta**2)))
        D_n = float(((x**2).sum(axis=0) * Tn).sum())
        T_hat = np.exp(-1j * (kgrid @ x)) @ Tn
        gdist = float(np.max(np.abs(T_hat - gauss)))
        mass_err = float(np.max(np.abs(A.sum(axis=0) - 1.0)))
        records.append(RGFlowRecord(seed, n, L, D_n, eps_n, gdist, mass_err,
                                    D0 / 2 <= D_n <= 2 * D0, Tn.reshape(geometry.shape) if keep_kernels else None))
    return RGExperimentResult(records, partial)
