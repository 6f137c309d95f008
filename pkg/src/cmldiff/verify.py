"""Weak-distance test of the diffusive scaling limit.

A point mass is evolved by the coupled map lattice for ``L^(2n)`` steps, the
profile is rescaled to ``E_n(x) = L^(nd) E(L^(2n), L^n x)`` and integrated
against smooth test functions ``G``. The distance at scale ``n`` is

    int dx G(x) (E_n(x) - |E_0|_1 T*_D(x))

with the midpoint rule on the scale-``n`` grid (``int = L^(-nd) sum``) and
``T*_D(x) = (d / 2 pi D)^(d/2) exp(-d |x|^2 / 2D)``.
"""
from __future__ import annotations

import csv
import json
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .lattice import CurrentModel, EnergyField, LatticeGeometry, LocalChaoticMap, ThetaField, run_trajectory
from .rg import (ScaledField, TranslationKernel, check_box, diffusion_constant, estimate_effective_D,
                 gaussian_density)
from .rwre import initial_theta
from .seeding import ordered_map, stream

SCHEMA_VERSION = 1
ZERO_TOL = 1e-12


class LowDimensionWarning(UserWarning):
    """d = 1 lies outside the dimensions covered by the convergence result."""


@dataclass(frozen=True)
class GaussianFixedPoint:
    d: int
    D: float

    def __post_init__(self):
        if not self.D > 0:
            raise ValueError(f"diffusion constant must be positive, got {self.D}")
        if self.d < 1:
            raise ValueError("dimension must be positive")


def _coords(x, d: int) -> np.ndarray:
    """Coordinates with a leading axis of length ``d``; d=1 accepts plain arrays."""
    x = np.asarray(x, dtype=float)
    if d == 1 and (x.ndim == 0 or x.shape[0] != 1):
        x = x[None]
    if x.shape[0] != d:
        raise ValueError(f"expected {d} coordinates on the leading axis")
    return x


def gaussian_eval(fp: GaussianFixedPoint, x) -> np.ndarray:
    x = _coords(x, fp.d)
    return gaussian_density((x**2).sum(axis=0), fp.D, fp.d)


class TestFunction(NamedTuple):
    name: str
    func: Callable[[np.ndarray], np.ndarray]   # coordinates (d, ...) -> values
    sup: float
    grad_sup: float


def _bump(r2: np.ndarray, radius: float = 2.0) -> np.ndarray:
    s = r2 / radius**2
    out = np.zeros_like(s)
    inside = s < 1.0
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - s[inside]))
    return out


def _numeric_sups(func, d: int, extent: float = 12.0, n: int = 1201) -> tuple[float, float]:
    """Sup of ``|G|`` and ``|grad G|`` on a fine grid in the plane of the first two axes."""
    g = np.linspace(-extent, extent, n)
    h = g[1] - g[0]
    if d == 1:
        X = g[None]
        v = func(X)
        grad = np.gradient(v, h)
        return float(np.abs(v).max()), float(np.abs(grad).max())
    A, B = np.meshgrid(g, g, indexing="ij")
    X = np.zeros((d,) + A.shape)
    X[0], X[1] = A, B
    v = func(X)
    ga, gb = np.gradient(v, h, h)
    return float(np.abs(v).max()), float(np.sqrt(ga**2 + gb**2).max())


def default_test_functions(d: int) -> list[TestFunction]:
    """Constant 1, ``exp(-|x|^2)``, two cos-modulated wide Gaussians and a compact bump."""
    k_a = np.zeros(d)
    k_a[0] = 1.0
    k_b = np.ones(d) if d > 1 else np.array([2.0])

    def const(x):
        return np.ones(x.shape[1:])

    def gauss(x):
        return np.exp(-(x**2).sum(axis=0))

    def cosmod(k):
        def f(x):
            return np.cos(np.tensordot(k, x, axes=1)) * np.exp(-(x**2).sum(axis=0) / 16.0)
        return f

    def bump(x):
        return _bump((x**2).sum(axis=0))

    out = [TestFunction("one", const, 1.0, 0.0),
           TestFunction("gauss", gauss, 1.0, math.sqrt(2.0) * math.exp(-0.5))]
    for name, f in (("cos_a", cosmod(k_a)), ("cos_b", cosmod(k_b)), ("bump", bump)):
        out.append(TestFunction(name, f, *_numeric_sups(f, d)))
    return out


def periodic_gaussian(x: np.ndarray, D: float, period: float, images: int = 3) -> np.ndarray:
    """``T*_D`` summed over the periodic images of the box (factorizes over axes)."""
    d = x.shape[0]
    out = np.full(x.shape[1:], (d / (2 * np.pi * D)) ** (d / 2))
    shifts = period * np.arange(-images, images + 1)
    for mu in range(d):
        xs = x[mu][..., None] + shifts
        out = out * np.exp(-d * xs**2 / (2 * D)).sum(axis=-1)
    return out


def weak_distance(profile: ScaledField, G: TestFunction, D: float, mass0: float) -> float:
    """``int G (profile - mass0 T*_D)`` with the scale-``n`` midpoint rule.

    Both densities live on the periodic box: ``T*_D`` is summed over images
    so that its grid integral is 1 to rounding, and ``G`` is evaluated at
    minimum-image coordinates around the profile origin.
    """
    x = profile.positions()
    Gx = G.func(x)
    ref = periodic_gaussian(x, D, profile.geometry.M * profile.spacing)
    return profile.integrate(Gx) - mass0 * profile.cell_volume * math.fsum((Gx * ref).ravel())


@dataclass
class WeakDistanceReport:
    tests: list[TestFunction]
    L: int
    scales: list[int]
    seeds: list[int]
    D_hat: list[float]
    D0: float
    distances: np.ndarray            # (seed, n, G), signed
    partial: bool = False
    config: dict = field(default_factory=dict)

    def medians(self) -> np.ndarray:
        """Median over seeds of ``|distance|``, shape ``(n, G)``."""
        return np.median(np.abs(self.distances), axis=0)

    def median_decreasing(self) -> dict[str, bool]:
        med = self.medians()
        return {G.name: is_decreasing(med[:, j]) for j, G in enumerate(self.tests)}

    def seed_trend_fraction(self) -> dict[str, float]:
        """Fraction of seeds whose ``|distance|`` decreases monotonically in ``n``."""
        a = np.abs(self.distances)
        return {G.name: float(np.mean([is_decreasing(a[s, :, j]) for s in range(a.shape[0])]))
                for j, G in enumerate(self.tests)}

    def as_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "L": self.L,
            "scales": self.scales,
            "seeds": self.seeds,
            "D0": self.D0,
            "D_hat": self.D_hat,
            "partial": self.partial,
            "test_functions": [{"name": G.name, "sup": G.sup, "grad_sup": G.grad_sup} for G in self.tests],
            "median_abs_distance": {G.name: self.medians()[:, j].tolist() for j, G in enumerate(self.tests)},
            "median_decreasing": self.median_decreasing(),
            "seed_trend_fraction": self.seed_trend_fraction(),
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    CSV_COLUMNS = ("seed", "n", "G", "distance")

    def rows(self) -> list[list]:
        out = []
        for s, seed in enumerate(self.seeds):
            for i, n in enumerate(self.scales):
                for j, G in enumerate(self.tests):
                    out.append([seed, n, G.name, repr(float(self.distances[s, i, j]))])
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.CSV_COLUMNS)
            w.writerows(self.rows())


def is_decreasing(values: Sequence[float], atol: float = ZERO_TOL) -> bool:
    """Strict decrease, except that steps between values both below ``atol`` count as decreasing."""
    v = np.asarray(values, dtype=float)
    return bool(all(b < a or (a <= atol and b <= atol) for a, b in zip(v[:-1], v[1:])))


def rescaled_profile(E: np.ndarray, geometry: LatticeGeometry, L: int, n: int, origin) -> ScaledField:
    return ScaledField(geometry, float(L) ** (n * geometry.d) * np.asarray(E), L, n, tuple(origin))


def run_seed(E0: EnergyField, model: CurrentModel, cmap: LocalChaoticMap, L: int, n_max: int,
             rng: np.random.Generator, burn_in: int = 64, origin=None,
             deadline: float | None = None) -> list[ScaledField]:
    """Rescaled profiles ``E_1 .. E_n_max`` for one environment; stops early past ``deadline``."""
    geo = E0.geometry
    origin = np.unravel_index(int(np.argmax(E0.values)), geo.shape) if origin is None else origin
    th0 = ThetaField(geo, initial_theta(cmap, geo, rng, burn_in))
    profiles, E = [], E0
    t = 0
    for n in range(1, n_max + 1):
        if deadline is not None and time.monotonic() > deadline:
            break
        steps = L ** (2 * n) - t
        traj = run_trajectory(E, th0, model, cmap, steps, rng=rng)
        E = traj.energy(steps)
        th0 = ThetaField(geo, traj.thetas[-1])
        t += steps
        profiles.append(rescaled_profile(E.values, geo, L, n, origin))
    return profiles


def scaling_limit_test(E0: EnergyField, model: CurrentModel, cmap: LocalChaoticMap, L: int, n_max: int,
                       seeds: Sequence[int], master_seed: int = 0, tests: Sequence[TestFunction] | None = None,
                       delta: float = 1.0, burn_in: int = 64, D: float | None = None, origin=None,
                       deadline: float | None = None, config: dict | None = None,
                       threads: int = 1) -> WeakDistanceReport:
    """Weak distances to the Gaussian fixed point for ``n = 1..n_max`` and every seed.

    ``D`` defaults to the per-seed moment estimate at the deepest scale; the
    analytic ``D0`` of the mean kernel is reported alongside. Seeds run on
    ``threads`` workers; each owns its random stream, so results do not
    depend on the worker count.
    """
    geo = E0.geometry
    mass0 = E0.mass()
    if mass0 > delta:
        raise ValueError(f"initial mass {mass0:g} exceeds the configured bound {delta:g}")
    if geo.d == 1:
        warnings.warn("d=1 runs lie outside the proven regime (d >= 2)", LowDimensionWarning, stacklevel=2)
    D0 = diffusion_constant(TranslationKernel.hopping(geo.d, model.a))
    check_box(geo.M, D0, L, n_max, geo.d)
    tests = list(default_test_functions(geo.d) if tests is None else tests)
    dist = np.full((len(seeds), n_max, len(tests)), np.nan)
    D_hat, partial = [], False

    def job(seed):
        rng = stream(master_seed, "verify", int(seed))
        return run_seed(E0, model, cmap, L, n_max, rng, burn_in, origin, deadline)

    for s, profiles in enumerate(ordered_map(job, seeds, threads)):
        if len(profiles) < n_max:
            partial = True
        if not profiles:
            D_hat.append(math.nan)
            continue
        Ds = estimate_effective_D(profiles[-1]).D if D is None else D
        D_hat.append(Ds)
        for i, p in enumerate(profiles):
            for j, G in enumerate(tests):
                dist[s, i, j] = weak_distance(p, G, Ds, mass0)
    if partial:
        keep = ~np.isnan(dist).any(axis=(1, 2))
        dist, seeds, D_hat = dist[keep], [s for s, k in zip(seeds, keep) if k], [d for d, k in zip(D_hat, keep) if k]
    return WeakDistanceReport(tests, L, list(range(1, n_max + 1)), [int(s) for s in seeds], D_hat, D0,
                              dist, partial, dict(config or {}))


def oracle_distance(T: TranslationKernel, geometry: LatticeGeometry, L: int, n: int, G: TestFunction,
                    D: float, mass0: float = 1.0) -> float:
    """Weak distance of the pure convolution ``T^(L^(2n))`` started from a point mass at 0."""
    spec = np.fft.fftn(T.on_box(geometry)) ** (L ** (2 * n))
    site = mass0 * np.real(np.fft.ifftn(spec))
    return weak_distance(rescaled_profile(site, geometry, L, n, (0,) * geometry.d), G, D, mass0)
