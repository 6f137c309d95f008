"""Random walk in the random environment generated by the theta dynamics.

The energy update is linear in ``E`` for the exchange current, so its
derivative at ``E = 0`` is the transition stencil itself:
``p_t(y + e, y) = a + eps * w(theta_t(y), theta_t(y + e), +-1)`` and
``p_t(y, y) = 1 - sum`` of the outgoing rates.

Environments are stored stencil-sparse and time-major: ``weights[t, j, y]``
is ``p_t(y + offsets[j], y)``.
"""
from __future__ import annotations

import itertools
import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .lattice import (
    CurrentModel,
    EnergyField,
    LatticeGeometry,
    LocalChaoticMap,
    ThetaField,
    apply_stencil,
    energy_update,
    theta_update,
    transition_stencil,
)
from .norms import decay_rate_fit, stencil_kernel_norm

STOCHASTIC_TOL = 1e-14
ENV_MAGIC = b"CMLENV01"


class SymmetryWarning(UserWarning):
    """Point-group symmetrization moved the annealed kernel by more than 3 standard errors."""


class LinearizationWarning(UserWarning):
    """Closed-form linearization unavailable; finite differences were used."""


@dataclass(frozen=True)
class EnvironmentKernel:
    geometry: LatticeGeometry
    weights: np.ndarray
    finite_difference: bool = False

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        expected = (len(self.geometry.offsets),) + self.geometry.shape
        if w.ndim != self.geometry.d + 2 or w.shape[1:] != expected:
            raise ValueError(f"environment weights must have shape (t_max, {expected}), got {w.shape}")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def t_max(self) -> int:
        return self.weights.shape[0]

    def column_sum_error(self) -> float:
        return float(np.max(np.abs(self.weights.sum(axis=1) - 1.0))) if self.t_max else 0.0

    def is_stochastic(self) -> bool:
        return bool(np.all(self.weights >= 0)) and self.column_sum_error() <= STOCHASTIC_TOL

    def dense(self, t: int) -> np.ndarray:
        """Dense ``(N, N)`` matrix of slice ``t``; sites flattened in C order."""
        geo = self.geometry
        N = geo.n_sites
        P = np.zeros((N, N))
        ys = np.arange(N)
        coords = np.array(np.unravel_index(ys, geo.shape))
        for j, off in enumerate(geo.offsets):
            xs = np.ravel_multi_index(tuple((coords[mu] + off[mu]) % geo.M for mu in range(geo.d)), geo.shape)
            np.add.at(P, (xs, ys), self.weights[t, j].ravel())
        return P


def environment_from_thetas(thetas: np.ndarray, model: CurrentModel, geometry: LatticeGeometry,
                            check: bool = True) -> EnvironmentKernel:
    """Closed-form linearization at ``E = 0`` along a stored theta trajectory."""
    slices = []
    for th in thetas:
        w = transition_stencil(model.rates(th, geometry), clamp=False)
        dev = float(np.max(np.abs(w.sum(axis=0) - 1.0)))
        if dev > STOCHASTIC_TOL:
            raise AssertionError(f"column sums deviate by {dev:g} before renormalization")
        slices.append(w / w.sum(axis=0, keepdims=True))
    weights = np.stack(slices) if slices else np.zeros((0, len(geometry.offsets)) + geometry.shape)
    if check and np.any(weights < 0):
        raise ValueError("linearized kernel has negative entries: model violates positivity")
    return EnvironmentKernel(geometry, weights)


def linearize_at_zero(theta_trajectory: Sequence[ThetaField] | np.ndarray, model: CurrentModel,
                      geometry: LatticeGeometry | None = None, step: Callable | None = None,
                      check: bool = True) -> EnvironmentKernel:
    """Environment kernel ``p_t = dE(t+1)/dE(t)`` at ``E = 0``.

    ``step(E, theta)`` substitutes a custom energy update, in which case the
    derivative is taken by central finite differences and the result flagged.
    """
    if len(theta_trajectory) and isinstance(theta_trajectory[0], ThetaField):
        geometry = theta_trajectory[0].geometry
        thetas = np.stack([th.values for th in theta_trajectory])
    else:
        thetas = np.asarray(theta_trajectory)
    if geometry is None:
        raise ValueError("geometry is required for raw theta arrays")
    if step is None:
        return environment_from_thetas(thetas, model, geometry, check=check)
    warnings.warn("closed-form linearization unavailable; using finite differences", LinearizationWarning)
    slices = [finite_difference_stencil(lambda E: step(E, th), geometry) for th in thetas]
    return EnvironmentKernel(geometry, np.stack(slices), finite_difference=True)


def finite_difference_stencil(f: Callable[[np.ndarray], np.ndarray], geometry: LatticeGeometry,
                              h: float = 1e-6, base: np.ndarray | None = None) -> np.ndarray:
    """Central-difference derivative of ``f`` at ``base`` (default 0) in stencil form.

    At ``base = 0`` only the forward side is admissible (energies stay
    nonnegative), so a one-sided difference is used there.
    """
    out = np.empty((len(geometry.offsets),) + geometry.shape)
    E0 = np.zeros(geometry.shape) if base is None else np.asarray(base, dtype=float)
    one_sided = base is None or np.any(E0 < h)
    f0 = f(E0) if one_sided else None
    for y in np.ndindex(geometry.shape):
        e = np.zeros(geometry.shape)
        e[y] = h
        col = (f(E0 + e) - f0) / h if one_sided else (f(E0 + e) - f(E0 - e)) / (2 * h)
        for j, off in enumerate(geometry.offsets):
            x = tuple((y[mu] + off[mu]) % geometry.M for mu in range(geometry.d))
            out[(j,) + y] = col[x]
    return out


def generate_environment(model: CurrentModel, cmap: LocalChaoticMap, geometry: LatticeGeometry,
                         t_max: int, rng: np.random.Generator, burn_in: int = 64,
                         check: bool = True) -> tuple[EnvironmentKernel, np.ndarray]:
    """Sample ``theta(0)`` from the SRB measure by burn-in and linearize along its orbit.

    Returns the environment and the final theta array.
    """
    th = initial_theta(cmap, geometry, rng, burn_in)
    thetas = []
    for _ in range(t_max):
        thetas.append(th)
        th = theta_update(th, cmap, geometry, rng)
    if not thetas:
        return EnvironmentKernel(geometry, np.zeros((0, len(geometry.offsets)) + geometry.shape)), th
    return environment_from_thetas(np.stack(thetas), model, geometry, check=check), th


def initial_theta(cmap: LocalChaoticMap, geometry: LatticeGeometry, rng: np.random.Generator,
                  burn_in: int = 64) -> np.ndarray:
    th = rng.random(geometry.shape + ((2,) if cmap.torus else ()))
    for _ in range(burn_in):
        th = theta_update(th, cmap, geometry, rng)
    return th


def iter_environment(model: CurrentModel, cmap: LocalChaoticMap, geometry: LatticeGeometry,
                     rng: np.random.Generator, burn_in: int = 64):
    """Endless stream of environment slices without storing them."""
    th = initial_theta(cmap, geometry, rng, burn_in)
    while True:
        w = transition_stencil(model.rates(th, geometry))
        yield w / w.sum(axis=0, keepdims=True)
        th = theta_update(th, cmap, geometry, rng)


@dataclass(frozen=True)
class TranslationKernel:
    """Translation-invariant kernel ``T(u)`` on the box ``|u_mu| <= radius``.

    ``values`` has shape ``(2r+1,)*d`` with ``u = 0`` at the centre.
    ``stderr`` holds per-entry Monte Carlo standard errors (zeros if exact).
    """

    values: np.ndarray
    stderr: np.ndarray | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if any(s != v.shape[0] or s % 2 == 0 for s in v.shape):
            raise ValueError("kernel support must be a centred odd cube")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        se = np.zeros_like(v) if self.stderr is None else np.array(self.stderr, dtype=float)
        se.setflags(write=False)
        object.__setattr__(self, "stderr", se)

    @property
    def d(self) -> int:
        return self.values.ndim

    @property
    def radius(self) -> int:
        return self.values.shape[0] // 2

    def offsets(self) -> np.ndarray:
        """Integer displacement of each entry, shape ``(d, *values.shape)``."""
        r = self.radius
        return np.indices(self.values.shape) - r

    @classmethod
    def hopping(cls, d: int, a: float) -> "TranslationKernel":
        v = np.zeros((3,) * d)
        c = (1,) * d
        v[c] = 1.0 - 2 * d * a
        for mu in range(d):
            for s in (0, 2):
                idx = list(c)
                idx[mu] = s
                v[tuple(idx)] = a
        return cls(v)

    @classmethod
    def from_stencil(cls, weights: Sequence[float], d: int, stderr: Sequence[float] | None = None) -> "TranslationKernel":
        """Build from ``2d+1`` stencil weights ordered like :attr:`LatticeGeometry.offsets`."""
        offs = LatticeGeometry(d, 3).offsets
        v = np.zeros((3,) * d)
        se = np.zeros((3,) * d)
        for j, off in enumerate(offs):
            v[tuple(o + 1 for o in off)] = weights[j]
            if stderr is not None:
                se[tuple(o + 1 for o in off)] = stderr[j]
        return cls(v, se)

    def stencil(self) -> np.ndarray:
        offs = LatticeGeometry(self.d, 3).offsets
        r = self.radius
        return np.array([self.values[tuple(o + r for o in off)] for off in offs])

    def total(self) -> float:
        return math.fsum(self.values.ravel())

    def fourier(self, k: np.ndarray) -> np.ndarray:
        """``T_hat(k) = sum_u T(u) exp(-i k.u)``; ``k`` has trailing axis of length d (or scalar in d=1)."""
        k = np.asarray(k, dtype=float)
        if self.d == 1 and (k.ndim == 0 or k.shape[-1] != 1):
            k = k[..., None]
        u = self.offsets().reshape(self.d, -1)
        phase = np.tensordot(k, u, axes=([-1], [0]))
        return np.exp(-1j * phase) @ self.values.ravel()

    def on_box(self, geometry: LatticeGeometry) -> np.ndarray:
        """Periodic embedding ``T(x)`` on the box (origin at index 0)."""
        if 2 * self.radius + 1 > geometry.M:
            raise ValueError("kernel support does not fit in the box")
        out = np.zeros(geometry.shape)
        idx = tuple(o.ravel() % geometry.M for o in self.offsets())
        np.add.at(out, idx, self.values.ravel())
        return out

    def dual_grid_max(self, M: int) -> float:
        """``max_{k != 0} |T_hat(k)|`` over the dual grid ``2 pi j / M``."""
        geo = LatticeGeometry(self.d, M)
        spec = np.abs(np.fft.fftn(self.on_box(geo)))
        spec.ravel()[0] = -np.inf
        return float(spec.max())


def point_group(d: int) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """Hyperoctahedral group as (axis permutation, sign flips)."""
    return [(perm, signs) for perm in itertools.permutations(range(d))
            for signs in itertools.product((1, -1), repeat=d)]


def symmetrize(values: np.ndarray) -> np.ndarray:
    d = values.ndim
    acc = np.zeros_like(values)
    group = point_group(d)
    for perm, signs in group:
        v = np.transpose(values, perm)
        for mu, s in enumerate(signs):
            if s < 0:
                v = np.flip(v, axis=mu)
        acc += v
    return acc / len(group)


def _sample_slices(model, cmap, geometry, n_samples, rng, burn_in):
    for _ in range(n_samples):
        th = initial_theta(cmap, geometry, rng, burn_in)
        w = transition_stencil(model.rates(th, geometry), clamp=False)
        yield th, w


def annealed_kernel(model: CurrentModel, cmap: LocalChaoticMap, geometry: LatticeGeometry,
                    n_samples: int, rng: np.random.Generator, burn_in: int = 64,
                    symmetric: bool = True) -> TranslationKernel:
    """Monte Carlo estimate of ``T(u) = E p_0(y + u, y)`` over SRB-sampled theta.

    Each sample contributes the site average of its stencil; errors are the
    standard error across samples. With ``symmetric`` the estimate is
    averaged over the lattice point group and renormalized to total mass 1.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    d = geometry.d
    if model.eps == 0.0:
        w = transition_stencil(model.rates(np.zeros(geometry.shape), geometry), clamp=False)
        return TranslationKernel.from_stencil(w.reshape(len(w), -1).mean(axis=1), d)
    means = np.array([w.reshape(len(w), -1).mean(axis=1)
                      for _, w in _sample_slices(model, cmap, geometry, n_samples, rng, burn_in)])
    est = means.mean(axis=0)
    se = means.std(axis=0, ddof=1) / np.sqrt(n_samples) if n_samples > 1 else np.full_like(est, np.inf)
    raw = TranslationKernel.from_stencil(est, d, se)
    if not symmetric:
        return raw
    sym = symmetrize(raw.values)
    shift = np.abs(sym - raw.values)
    if np.any(shift > 3 * raw.stderr + 1e-15):
        warnings.warn(f"point-group symmetrization moved T by up to {shift.max():.3g} "
                      f"(> 3 standard errors)", SymmetryWarning)
    c = (raw.radius,) * d
    sym[c] = 0.0
    sym[c] = 1.0 - math.fsum(sym.ravel())
    return TranslationKernel(sym, raw.stderr)


@dataclass(frozen=True)
class FluctuationField:
    """``delta_t(x, y) = p_t(x, y) - T(x - y)`` in stencil form."""

    geometry: LatticeGeometry
    delta: np.ndarray

    def column_sums(self) -> np.ndarray:
        return self.delta.sum(axis=1)

    def bond_field(self, t: int) -> np.ndarray:
        """d=1 bond field ``b_t(x, y)`` with ``b_t(x+1, y) - b_t(x, y) = delta_t(x, y)``.

        Gauge: ``b_t(0, y) = 0``; dense ``(M, M)`` array indexed ``[x, y]``.
        """
        if self.geometry.d != 1:
            raise NotImplementedError("bond-field reconstruction is only defined in d=1 (gauge ambiguity)")
        dense = EnvironmentKernel(self.geometry, self.delta[t:t + 1]).dense(0)
        b = np.zeros_like(dense)
        b[1:] = np.cumsum(dense[:-1], axis=0)
        return b


def fluctuation_split(env: EnvironmentKernel, T: TranslationKernel) -> FluctuationField:
    geo = env.geometry
    if T.d != geo.d:
        raise ValueError("kernel and environment dimensions differ")
    if T.radius > 1 and np.any(np.abs(T.values[_outside_stencil(T)]) > 0):
        raise ValueError("annealed kernel has support beyond the nearest-neighbour stencil")
    stencil = T.stencil()
    delta = env.weights - stencil.reshape((1, -1) + (1,) * geo.d)
    return FluctuationField(geo, delta)


def _outside_stencil(T):
    mask = np.ones(T.values.shape, dtype=bool)
    r = T.radius
    for off in LatticeGeometry(T.d, 3).offsets:
        mask[tuple(o + r for o in off)] = False
    return mask


def quenched_evolve(E0: EnergyField | np.ndarray, env: EnvironmentKernel, t: int,
                    start: int = 0) -> np.ndarray:
    """Apply ``p_{start+t-1} ... p_start`` to ``E0``.

    ``E0`` may carry trailing batch axes (several columns evolved at once).
    """
    values = E0.values if isinstance(E0, EnergyField) else np.asarray(E0, dtype=float)
    if t < 0 or start < 0 or start + t > env.t_max:
        raise IndexError(f"time range [{start}, {start + t}) exceeds environment length {env.t_max}")
    for s in range(start, start + t):
        values = apply_stencil(env.weights[s], values, env.geometry)
    return values


# ----------------------------------------------------------------------------
# assumption validators

@dataclass
class CheckResult:
    name: str
    passed: bool
    statistic: float
    threshold: float
    detail: str = ""
    witness: dict | None = None


@dataclass
class AssumptionReport:
    checks: dict[str, CheckResult] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())

    def failed(self) -> list[str]:
        return [name for name, c in self.checks.items() if not c.passed]

    def as_dict(self) -> dict:
        return {name: {"passed": c.passed, "statistic": c.statistic, "threshold": c.threshold,
                       "detail": c.detail, "witness": c.witness}
                for name, c in self.checks.items()}


ASSUMPTIONS = ("positivity", "conservation", "symmetry", "locality", "aperiodicity", "weak_randomness")


def validate_assumptions(model: CurrentModel, cmap: LocalChaoticMap, geometry: LatticeGeometry,
                         samples: int, rng: np.random.Generator, burn_in: int = 64,
                         lam: float = 0.1, z_threshold: float = 4.0) -> AssumptionReport:
    """Run the six structural checks on ``samples`` SRB-sampled environments.

    Check names: positivity, conservation, symmetry, locality, aperiodicity,
    weak_randomness. A failed check is recorded, never raised.
    """
    d = geometry.d
    draws = list(_sample_slices(model, cmap, geometry, samples, rng, burn_in))
    report = AssumptionReport()
    report.checks["positivity"] = _check_positivity(model, geometry, draws, rng)
    report.checks["conservation"] = _check_conservation(model, geometry, draws, rng)
    report.checks["symmetry"] = _check_symmetry(draws, d, z_threshold)
    report.checks["locality"] = _check_locality(model, geometry, draws[0][0])
    means = np.array([w.reshape(len(w), -1).mean(axis=1) for _, w in draws])
    T = TranslationKernel.from_stencil(means.mean(axis=0), d)
    report.checks["aperiodicity"] = _check_aperiodicity(T, geometry.M)
    report.checks["weak_randomness"] = _check_weak_randomness(draws, T, lam)
    return report


def _check_positivity(model, geometry, draws, rng):
    worst, witness = np.inf, None
    for i, (th, _) in enumerate(draws):
        candidates = [rng.random(geometry.shape)]
        rates = model.rates(th, geometry)
        # the site with the largest outflow is the natural counterexample
        site = np.unravel_index(int(np.argmax(rates.sum(axis=0))), geometry.shape)
        candidates.append(geometry.spike(site))
        for E in candidates:
            out = energy_update(E, th, model, geometry, clamp=False)
            m = float(out.min())
            if m < worst:
                worst = m
                if m < 0:
                    witness = {"sample": i, "site": [int(s) for s in np.unravel_index(int(np.argmin(out)), geometry.shape)],
                               "min_energy": m, "spike": bool(E.max() == 1.0 and E.sum() == 1.0)}
    return CheckResult("positivity", worst >= 0, worst, 0.0,
                       "min over sampled admissible E of the updated energy", witness)


def _check_conservation(model, geometry, draws, rng):
    worst = 0.0
    for th, _ in draws:
        E = rng.random(geometry.shape)
        out = energy_update(E, th, model, geometry, clamp=False)
        before = math.fsum(E.ravel())
        worst = max(worst, abs(math.fsum(out.ravel()) - before) / before)
    tol = 8 * np.finfo(float).eps
    return CheckResult("conservation", worst <= tol, worst, tol, "relative mass change per step")


def _check_symmetry(draws, d, z):
    # per-sample site means of the neighbour weights and their squares;
    # paired z-tests of every orbit element against +e_1
    w1 = np.array([w[1:].reshape(2 * d, -1).mean(axis=1) for _, w in draws])
    w2 = np.array([(w[1:] ** 2).reshape(2 * d, -1).mean(axis=1) for _, w in draws])
    n = len(draws)
    worst, detail = 0.0, "all orbit moments agree"
    for moments, label in ((w1, "mean"), (w2, "second moment")):
        for j in range(1, 2 * d):
            diff = moments[:, j] - moments[:, 0]
            m = diff.mean()
            se = diff.std(ddof=1) / np.sqrt(n) if n > 1 else 0.0
            if se == 0.0:
                zval = 0.0 if abs(m) <= 1e-15 else np.inf
            else:
                zval = abs(m) / se
            if zval > worst:
                worst, detail = zval, f"{label} of stencil entry {j + 1} vs entry 1: diff {m:.3g}"
    return CheckResult("symmetry", worst <= z, float(worst), z, detail)


def _check_locality(model, geometry, th, h=1e-6):
    rng = np.random.default_rng(0)
    base = 0.5 + rng.random(geometry.shape)
    f = lambda E: energy_update(E, th, model, geometry, clamp=False)
    origin = (0,) * geometry.d
    first = np.zeros(geometry.shape)
    e = np.zeros(geometry.shape)
    e[origin] = h
    first = np.abs((f(base + e) - f(base - e)) / (2 * h))
    dist = np.abs(geometry.displacement(origin)).sum(axis=0)
    rmax = int(dist.max())
    profile = np.array([first[dist == r].max() for r in range(rmax + 1)])
    # linear model: the second derivative is identically zero, checked by a mixed difference
    e2 = np.zeros(geometry.shape)
    e2[geometry.offsets[1]] = h
    second = np.abs(f(base + e + e2) - f(base + e) - f(base + e2) + f(base)) / h**2
    positive = profile > 1e-9
    if positive.sum() >= 3:
        fit = decay_rate_fit(np.arange(rmax + 1)[positive], profile[positive])
        ok = fit.m > 0
        stat, detail = fit.m, f"fitted decay rate m = {fit.m:.3g}"
    else:
        reach = int(np.nonzero(positive)[0].max()) if positive.any() else 0
        ok, stat = True, float(reach)
        detail = f"first derivative vanishes beyond distance {reach} (finite range)"
    if second.max() > 1e-3:
        ok = False
        detail += f"; mixed second difference {second.max():.3g}"
    return CheckResult("locality", ok, stat, 0.0, detail)


def _check_aperiodicity(T, M):
    mx = T.dual_grid_max(M)
    return CheckResult("aperiodicity", mx < 1.0 - 1e-12, mx, 1.0, "max_{k != 0} |T_hat(k)| on the dual grid")


def _check_weak_randomness(draws, T, lam):
    stencil = T.stencil().reshape((-1,) + (1,) * T.d)
    eps_hat = max(stencil_kernel_norm(w - stencil, lam) for _, w in draws)
    bound = 1.0 - float(T.stencil()[0])
    return CheckResult("weak_randomness", eps_hat <= bound + 1e-15, eps_hat, bound,
                       f"sup_t ||delta_t||_lambda at lambda={lam} vs mean hop mass 1 - T(0)")


# ----------------------------------------------------------------------------
# annealed current

@dataclass(frozen=True)
class AnnealedDiffusion:
    current: np.ndarray          # mean bond flux, shape (d, *shape)
    current_stderr: np.ndarray
    conductivity: np.ndarray     # fitted d x d matrix kappa(0)
    conductivity_stderr: np.ndarray
    ill_conditioned: bool


def annealed_current(model: CurrentModel, cmap: LocalChaoticMap, E_profile: EnergyField,
                     samples: int, rng: np.random.Generator, burn_in: int = 64,
                     noise_floor: float = 1e-12) -> AnnealedDiffusion:
    """Monte Carlo mean of the bond flux and a least-squares fit of ``kappa(0)``.

    The flux ``phi_mu(x)`` from ``x`` to ``x + e_mu`` is fitted as
    ``phi_mu = -sum_nu kappa_{mu nu} grad_nu E``; for the exchange model
    ``kappa(0) = a * identity``.
    """
    geo = E_profile.geometry
    E = E_profile.values
    d = geo.d
    fluxes = []
    for th, _ in _sample_slices(model, cmap, geo, samples, rng, burn_in):
        r = model.rates(th, geo)
        phi = np.empty((d,) + geo.shape)
        for mu in range(d):
            e = geo.offsets[1 + 2 * mu]
            phi[mu] = r[2 * mu] * E - geo.neighbour(r[2 * mu + 1] * E, e)
        fluxes.append(phi)
    fluxes = np.array(fluxes)
    mean = fluxes.mean(axis=0)
    se = fluxes.std(axis=0, ddof=1) / np.sqrt(samples) if samples > 1 else np.zeros_like(mean)
    grad = np.array([geo.neighbour(E, geo.offsets[1 + 2 * mu]) - E for mu in range(d)])
    X = grad.reshape(d, -1).T
    gram = X.T @ X
    ill = bool(np.linalg.eigvalsh(gram).min() <= noise_floor * max(1.0, float(np.abs(E).max())) ** 2)
    kappa = np.full((d, d), np.nan)
    kappa_se = np.full((d, d), np.nan)
    if not ill:
        per_sample = np.array([-np.linalg.solve(gram, X.T @ f.reshape(d, -1).T).T for f in fluxes])
        kappa = per_sample.mean(axis=0)
        kappa_se = per_sample.std(axis=0, ddof=1) / np.sqrt(samples) if samples > 1 else np.zeros((d, d))
    return AnnealedDiffusion(mean, se, kappa, kappa_se, ill)


# ----------------------------------------------------------------------------
# binary environment container
#
# layout: 8-byte magic "CMLENV01" | uint32 LE header length | UTF-8 JSON header
#         | float64 LE weights in C order, shape (t_max, 2d+1, M, ..., M)

def save_environment(path, env: EnvironmentKernel, model: CurrentModel, cmap: LocalChaoticMap,
                     master_seed: int) -> None:
    header = {
        "d": env.geometry.d, "M": env.geometry.M, "t_max": env.t_max,
        "model": {"a": model.a, "eps": model.eps, "observable": model.observable},
        "map": {"variant": cmap.variant, "kappa": cmap.kappa, "coupling": cmap.coupling},
        "master_seed": master_seed, "byte_order": "little", "dtype": "float64",
        "offsets": [list(o) for o in env.geometry.offsets],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(ENV_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(np.ascontiguousarray(env.weights, dtype="<f8").tobytes())


def load_environment(path) -> tuple[EnvironmentKernel, dict]:
    with open(path, "rb") as fh:
        if fh.read(8) != ENV_MAGIC:
            raise ValueError(f"{path} is not an environment container")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n).decode("utf-8"))
        data = np.frombuffer(fh.read(), dtype="<f8")
    geo = LatticeGeometry(header["d"], header["M"])
    shape = (header["t_max"], len(geo.offsets)) + geo.shape
    return EnvironmentKernel(geo, data.reshape(shape).astype(float)), header
