"""Energy-conserving coupled map lattice on a periodic box.

Each site ``x`` of a periodic box ``(Z/M)^d`` carries a nonnegative energy
``E(x)`` and a chaotic coordinate ``theta(x)`` on the circle or the 2-torus.
One time step is

    E(t+1)     = E(t) + div J(E(t), theta(t))
    theta(t+1) = g(theta(t)) + psi(theta(t))   (mod 1)

The current is an exchange current: across every bond a fraction
``a + eps * w(theta_src, theta_dst, orientation)`` of the source energy hops
to the neighbour. With ``2d (a + eps) <= 1`` the outflow of a site never
exceeds its energy, so the update is a convex redistribution.

Arrays are indexed ``values[x1, x2, ..., xd]``. Flat serialization uses
Fortran order so that ``x1`` varies fastest; see :func:`to_flat`.

Doubling and cat maps discard one bit of resolution per step in double
precision (the doubling map sends every float to 0 in about 53 steps).
:func:`step_theta` therefore accepts a generator that redraws the bits below
``2**-TAIL_BITS`` after every step, which is what a Lebesgue-typical orbit
would shift into view. Trajectories are shadowing quality only; statistics
are what is meaningful.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

TWO_PI = 2.0 * np.pi
TAIL_BITS = 48
CAT_MATRIX = np.array([[2, 1], [1, 1]], dtype=np.int64)


class PositivityError(ValueError):
    """Raised when a current model can drive an energy below zero."""


class SnapshotBudgetError(MemoryError):
    """Raised when a snapshot schedule would exceed the configured memory budget."""


def wrap(x: np.ndarray) -> np.ndarray:
    """Reduce modulo 1 into ``[0, 1)``; floor-based, never returns 1.0."""
    y = x - np.floor(x)
    return np.where(y >= 1.0, 0.0, y)


@dataclass(frozen=True)
class LatticeGeometry:
    d: int
    M: int

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {self.d}")
        if self.M < 2:
            raise ValueError(f"box side must be at least 2, got {self.M}")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.M,) * self.d

    @property
    def n_sites(self) -> int:
        return self.M**self.d

    @property
    def offsets(self) -> list[tuple[int, ...]]:
        """Stencil offsets: origin first, then ``+e_mu, -e_mu`` for each axis."""
        out = [(0,) * self.d]
        for mu in range(self.d):
            for s in (1, -1):
                out.append(tuple(s if nu == mu else 0 for nu in range(self.d)))
        return out

    def shift(self, values: np.ndarray, offset: Sequence[int]) -> np.ndarray:
        """Return ``f`` with ``f(x + offset) = values(x)`` (periodic)."""
        axes = tuple(range(self.d))
        return np.roll(values, tuple(offset), axis=axes)

    def neighbour(self, values: np.ndarray, offset: Sequence[int]) -> np.ndarray:
        """Return ``f`` with ``f(x) = values(x + offset)`` (periodic)."""
        return self.shift(values, tuple(-o for o in offset))

    def displacement(self, origin: Sequence[int] | None = None) -> np.ndarray:
        """Minimum-image integer displacement of every site from ``origin``.

        Shape ``(d, *shape)``.
        """
        origin = (0,) * self.d if origin is None else tuple(origin)
        idx = np.indices(self.shape)
        out = np.empty_like(idx)
        for mu in range(self.d):
            u = (idx[mu] - origin[mu]) % self.M
            out[mu] = np.where(u >= (self.M + 1) // 2, u - self.M, u)
        return out

    def spike(self, site: Sequence[int] | None = None, mass: float = 1.0) -> np.ndarray:
        values = np.zeros(self.shape)
        site = (0,) * self.d if site is None else tuple(site)
        values[site] = mass
        return values


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class EnergyField:
    geometry: LatticeGeometry
    values: np.ndarray

    def __post_init__(self):
        vals = _frozen(self.values)
        if vals.shape != self.geometry.shape:
            raise ValueError(f"energy shape {vals.shape} does not match {self.geometry.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("energy field has non-finite entries")
        if np.any(vals < 0):
            raise ValueError("energy field must be nonnegative")
        object.__setattr__(self, "values", vals)

    def mass(self) -> float:
        """Total energy, summed exactly (compensated)."""
        return math.fsum(self.values.ravel())


@dataclass(frozen=True)
class ThetaField:
    geometry: LatticeGeometry
    values: np.ndarray

    def __post_init__(self):
        vals = _frozen(self.values)
        shape = self.geometry.shape
        if vals.shape not in (shape, shape + (2,)):
            raise ValueError(f"theta shape {vals.shape} fits neither circle {shape} nor torus {shape + (2,)}")
        if np.any((vals < 0) | (vals >= 1)):
            raise ValueError("theta coordinates must lie in [0, 1)")
        object.__setattr__(self, "values", vals)

    @property
    def torus(self) -> bool:
        return self.values.ndim == self.geometry.d + 1

    @classmethod
    def uniform(cls, geometry: LatticeGeometry, rng: np.random.Generator, torus: bool = False) -> "ThetaField":
        shape = geometry.shape + ((2,) if torus else ())
        return cls(geometry, rng.random(shape))


@dataclass(frozen=True)
class LocalChaoticMap:
    """Local chaotic map ``g`` plus the coupling ``psi``.

    ``coupling="diffusive"`` (default) uses, per coordinate,
    ``psi(x) = kappa/(2 pi) * sum_mu [sin 2pi(th(x+e_mu)-th(x)) + sin 2pi(th(x-e_mu)-th(x))]``,
    which commutes with lattice reflections and axis permutations.
    ``coupling="antisymmetric"`` uses ``kappa/(2 pi) sin 2pi(th(x+e_1)-th(x-e_1))``.
    Both have mixed second derivatives supported on range 1.
    """

    variant: str = "doubling"
    kappa: float = 0.0
    coupling: str = "diffusive"

    def __post_init__(self):
        if self.variant not in ("doubling", "cat"):
            raise ValueError(f"unknown map variant {self.variant!r}")
        if self.coupling not in ("diffusive", "antisymmetric"):
            raise ValueError(f"unknown coupling {self.coupling!r}")
        if self.kappa < 0:
            raise ValueError("coupling strength must be nonnegative")

    @property
    def torus(self) -> bool:
        return self.variant == "cat"

    @property
    def expansion(self) -> float:
        if self.variant == "doubling":
            return 2.0
        return float(max(abs(np.linalg.eigvals(CAT_MATRIX))))

    def g(self, theta: np.ndarray) -> np.ndarray:
        if self.variant == "doubling":
            return 2.0 * theta
        t1, t2 = theta[..., 0], theta[..., 1]
        return np.stack([2.0 * t1 + t2, t1 + t2], axis=-1)

    def psi(self, theta: np.ndarray, geometry: LatticeGeometry) -> np.ndarray:
        if self.kappa == 0.0:
            return np.zeros_like(theta)
        c = self.kappa / TWO_PI
        if self.torus:
            # roll over spatial axes only; the trailing axis is the torus coordinate
            def nb(v, off):
                return np.roll(v, tuple(-o for o in off), axis=tuple(range(geometry.d)))
        else:
            nb = geometry.neighbour
        if self.coupling == "antisymmetric":
            e1 = geometry.offsets[1]
            return c * np.sin(TWO_PI * (nb(theta, e1) - nb(theta, tuple(-o for o in e1))))
        out = np.zeros_like(theta)
        for off in geometry.offsets[1:]:
            out += np.sin(TWO_PI * (nb(theta, off) - theta))
        return c * out

    def coupling_bound(self, d: int) -> float:
        """Sup-norm bound on ``|psi|`` (before reduction mod 1)."""
        n_terms = 1 if self.coupling == "antisymmetric" else 2 * d
        return n_terms * self.kappa / TWO_PI


def refresh_tail(theta: np.ndarray, rng: np.random.Generator, bits: int = TAIL_BITS) -> np.ndarray:
    """Replace the bits of ``theta`` below ``2**-bits`` with fresh uniform bits."""
    scale = float(2**bits)
    return wrap((np.floor(theta * scale) + rng.random(theta.shape)) / scale)


def step_theta(theta: ThetaField, cmap: LocalChaoticMap, rng: np.random.Generator | None = None) -> ThetaField:
    """One step ``theta -> g(theta) + psi(theta) mod 1``; never reads the energy.

    With ``rng`` given, unresolved low-order bits are redrawn after the step.
    """
    if theta.torus != cmap.torus:
        raise ValueError(f"{cmap.variant} map needs a {'torus' if cmap.torus else 'circle'} theta field")
    return ThetaField(theta.geometry, theta_update(theta.values, cmap, theta.geometry, rng))


def theta_update(theta: np.ndarray, cmap: LocalChaoticMap, geometry: LatticeGeometry,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    new = wrap(cmap.g(theta) + cmap.psi(theta, geometry))
    if rng is not None:
        new = refresh_tail(new, rng)
    return new


# Noise observables w(theta_src, theta_dst, orientation) -> [-1, 1].
# Torus fields use the first coordinate.

def w_cos(src: np.ndarray, dst: np.ndarray, orientation: int) -> np.ndarray:
    return np.cos(TWO_PI * (src - dst))


def w_biased(src: np.ndarray, dst: np.ndarray, orientation: int) -> np.ndarray:
    """Orientation-dependent observable; breaks reflection symmetry on purpose."""
    return 0.5 * orientation + 0.5 * np.cos(TWO_PI * (src - dst))


NOISE_OBSERVABLES: dict[str, Callable[[np.ndarray, np.ndarray, int], np.ndarray]] = {
    "cos": w_cos,
    "biased": w_biased,
}


@dataclass(frozen=True)
class CurrentModel:
    """Exchange current with base hopping rate ``a`` and noise amplitude ``eps``."""

    a: float = 0.25
    eps: float = 0.0
    observable: str = "cos"

    def __post_init__(self):
        if self.a < 0 or self.eps < 0:
            raise ValueError("hopping rate and noise amplitude must be nonnegative")
        if self.observable not in NOISE_OBSERVABLES:
            raise ValueError(f"unknown noise observable {self.observable!r}")

    def positivity_ok(self, d: int) -> bool:
        return 2 * d * (self.a + self.eps) <= 1.0

    def violations(self, d: int) -> list[str]:
        out = []
        if not self.positivity_ok(d):
            out.append(f"2d(a+eps) = {2 * d * (self.a + self.eps):g} > 1: positivity not guaranteed")
        if not self.eps < self.a:
            out.append(f"eps = {self.eps:g} >= a = {self.a:g}: annealed kernel not uniformly elliptic")
        return out

    def rates(self, theta: ThetaField | np.ndarray, geometry: LatticeGeometry | None = None) -> np.ndarray:
        """Hop rates out of every site, shape ``(2d, *shape)``.

        ``rates[j, y]`` is the fraction of ``E(y)`` moved to ``y + offsets[j+1]``.
        """
        if isinstance(theta, ThetaField):
            geometry, th = theta.geometry, theta.values
            torus = theta.torus
        else:
            th = np.asarray(theta)
            torus = th.ndim == geometry.d + 1
        if torus:
            th = th[..., 0]
        w = NOISE_OBSERVABLES[self.observable]
        out = np.empty((2 * geometry.d,) + geometry.shape)
        for j, off in enumerate(geometry.offsets[1:]):
            orientation = int(sum(off))
            if self.eps == 0.0:
                out[j] = self.a
            else:
                out[j] = self.a + self.eps * w(th, geometry.neighbour(th, off), orientation)
        return out


def transition_stencil(rates: np.ndarray, clamp: bool = True) -> np.ndarray:
    """Column-form stencil ``p(y + offsets[j], y)`` from hop rates, shape ``(2d+1, *shape)``."""
    stay = 1.0 - rates.sum(axis=0)
    if clamp:
        stay = np.maximum(stay, 0.0)
    return np.concatenate([stay[None], rates], axis=0)


def apply_stencil(weights: np.ndarray, values: np.ndarray, geometry: LatticeGeometry) -> np.ndarray:
    """``out(x) = sum_j weights[j, x - off_j] * values(x - off_j)``.

    ``values`` may carry trailing batch axes (one column per trailing index).
    """
    axes = tuple(range(geometry.d))
    extra = values.ndim - geometry.d
    out = np.zeros(values.shape, dtype=np.result_type(weights, values))
    for j, off in enumerate(geometry.offsets):
        wj = weights[j].reshape(weights[j].shape + (1,) * extra)
        term = wj * values
        out += np.roll(term, off, axis=axes) if any(off) else term
    return out


def divergence(J: np.ndarray, geometry: LatticeGeometry) -> np.ndarray:
    """Lattice divergence ``sum_mu J^mu(x + e_mu) - J^mu(x)`` with periodic wrap.

    ``J`` has shape ``(d, *shape)``: one value per (site, axis) bond.
    """
    J = np.asarray(J, dtype=float)
    if J.shape != (geometry.d,) + geometry.shape:
        raise ValueError(f"current shape {J.shape} does not match {(geometry.d,) + geometry.shape}")
    out = np.zeros(geometry.shape)
    for mu in range(geometry.d):
        out += np.roll(J[mu], -1, axis=mu) - J[mu]
    return out


def bond_currents(E: EnergyField, theta: ThetaField, model: CurrentModel) -> np.ndarray:
    """Current ``J`` with ``E + div J`` equal to the exchange update.

    ``J^mu(x) = -phi_mu(x - e_mu)`` where ``phi_mu(x)`` is the net flux from
    ``x`` to ``x + e_mu``.
    """
    geo = E.geometry
    r = model.rates(theta)
    J = np.empty((geo.d,) + geo.shape)
    for mu in range(geo.d):
        plus, minus = r[2 * mu], r[2 * mu + 1]
        e = geo.offsets[1 + 2 * mu]
        phi = plus * E.values - geo.neighbour(minus * E.values, e)
        J[mu] = -np.roll(phi, 1, axis=mu)
    return J


def energy_update(E: np.ndarray, theta: np.ndarray, model: CurrentModel, geometry: LatticeGeometry,
                  clamp: bool = True) -> np.ndarray:
    """Array-level energy step without the positivity guard."""
    return apply_stencil(transition_stencil(model.rates(theta, geometry), clamp=clamp), E, geometry)


def step_energy(E: EnergyField, theta: ThetaField, model: CurrentModel) -> EnergyField:
    """One conservative, positivity-preserving energy step."""
    if E.geometry != theta.geometry:
        raise ValueError("energy and theta fields live on different lattices")
    if not model.positivity_ok(E.geometry.d):
        raise PositivityError(model.violations(E.geometry.d)[0])
    return EnergyField(E.geometry, energy_update(E.values, theta.values, model, E.geometry))


@dataclass(frozen=True)
class Trajectory:
    times: tuple[int, ...]
    energies: tuple[np.ndarray, ...]
    thetas: tuple[np.ndarray, ...]
    geometry: LatticeGeometry = field(repr=False)

    def energy(self, t: int) -> EnergyField:
        return EnergyField(self.geometry, self.energies[self.times.index(t)])


def run_trajectory(E0: EnergyField, theta0: ThetaField, model: CurrentModel, cmap: LocalChaoticMap,
                   steps: int, snapshot_times: Iterable[int] | None = None,
                   rng: np.random.Generator | None = None,
                   max_snapshot_bytes: int = 1 << 30,
                   monitor: Callable[[int, np.ndarray], None] | None = None) -> Trajectory:
    """Evolve ``(E, theta)`` for ``steps`` steps and keep the requested snapshots.

    ``E(t+1)`` is computed from ``(E(t), theta(t))``, then ``theta`` advances.
    ``monitor(t, E_t)`` is called for every ``t = 1..steps``.
    Default snapshots are ``{0, steps}``.
    """
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    geo = E0.geometry
    if theta0.geometry != geo:
        raise ValueError("energy and theta fields live on different lattices")
    if not model.positivity_ok(geo.d):
        raise PositivityError(model.violations(geo.d)[0])
    times = sorted({0, steps} if snapshot_times is None else set(snapshot_times))
    if times and (times[0] < 0 or times[-1] > steps):
        raise ValueError(f"snapshot times must lie in [0, {steps}]")
    per_snapshot = E0.values.nbytes + theta0.values.nbytes
    if len(times) * per_snapshot > max_snapshot_bytes:
        raise SnapshotBudgetError(
            f"{len(times)} snapshots x {per_snapshot} bytes exceed the budget of {max_snapshot_bytes} bytes")
    wanted = set(times)
    E, th = E0.values, theta0.values
    energies, thetas = [], []
    if 0 in wanted:
        energies.append(E)
        thetas.append(th)
    for t in range(1, steps + 1):
        E = energy_update(E, th, model, geo)
        th = theta_update(th, cmap, geo, rng)
        if monitor is not None:
            monitor(t, E)
        if t in wanted:
            energies.append(E)
            thetas.append(th)
    return Trajectory(tuple(times), tuple(energies), tuple(thetas), geo)


def to_flat(values: np.ndarray) -> np.ndarray:
    """Flatten a site field with ``x1`` fastest, as little-endian float64."""
    return np.asarray(values, dtype="<f8").ravel(order="F")


def from_flat(flat: np.ndarray, geometry: LatticeGeometry) -> np.ndarray:
    return np.asarray(flat, dtype=float).reshape(geometry.shape, order="F")
