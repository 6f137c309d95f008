"""Sampling the invariant measure of the theta dynamics and measuring its mixing.

Samples come from Lebesgue initial data pushed through ``burn_in`` steps of
the coupled map. Each sample is drawn independently (fresh uniform data,
fresh burn-in) so that the finite-precision orbit structure of expanding
maps cannot leak into the statistics.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, NamedTuple, Sequence

import numpy as np

from .lattice import TWO_PI, LatticeGeometry, LocalChaoticMap, ThetaField, theta_update
from .norms import DecayFit, decay_rate_fit
from .rwre import initial_theta
from .seeding import stream


class Observable(NamedTuple):
    name: str
    func: Callable[[np.ndarray], np.ndarray]
    sup: float
    nonnegative: bool


def _first(theta: np.ndarray, torus: bool) -> np.ndarray:
    return theta[..., 0] if torus else theta


OBSERVABLES: dict[str, Observable] = {
    "cos": Observable("cos", lambda th: np.cos(TWO_PI * th), 1.0, False),
    "sawtooth": Observable("sawtooth", lambda th: th - 0.5, 0.5, False),
    "indicator": Observable("indicator", lambda th: (th < 0.5).astype(float), 1.0, True),
    "one_plus_cos": Observable("one_plus_cos", lambda th: 1.0 + np.cos(TWO_PI * th), 2.0, True),
}


def get_observable(obs: str | Observable) -> Observable:
    if isinstance(obs, Observable):
        return obs
    try:
        return OBSERVABLES[obs]
    except KeyError:
        raise ValueError(f"unknown observable {obs!r}; choose from {sorted(OBSERVABLES)}") from None


@dataclass
class SRBSampler:
    """Burn-in sampler; ``burn_in=0`` returns raw Lebesgue draws."""

    cmap: LocalChaoticMap
    geometry: LatticeGeometry
    burn_in: int = 64
    seed: int = 0
    replica: int = 0
    role: str = "srb"
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.burn_in < 0:
            raise ValueError("burn-in must be nonnegative")
        self.rng = stream(self.seed, self.role, self.replica)

    def draw(self) -> np.ndarray:
        return initial_theta(self.cmap, self.geometry, self.rng, self.burn_in)

    def evolve(self, theta: np.ndarray) -> np.ndarray:
        return theta_update(theta, self.cmap, self.geometry, self.rng)

    def trajectory(self, steps: int) -> Iterator[np.ndarray]:
        """One orbit of ``steps`` states starting from a burned-in sample."""
        th = self.draw()
        for _ in range(steps):
            yield th
            th = self.evolve(th)


def sample_srb(sampler: SRBSampler, n_samples: int) -> list[ThetaField]:
    if n_samples < 1:
        raise ValueError("need at least one sample")
    return [ThetaField(sampler.geometry, sampler.draw()) for _ in range(n_samples)]


@dataclass(frozen=True)
class CorrelationEstimate:
    observables: tuple[str, str]
    lag: int
    separation: int
    mean_product: float
    product_of_means: float
    covariance: float
    stderr: float
    count: int

    def z_score(self, exact: float = 0.0) -> float:
        return (self.covariance - exact) / self.stderr if self.stderr > 0 else math.inf


def _jackknife(stats: np.ndarray, estimator: Callable[[np.ndarray], float]) -> tuple[float, float]:
    """Delete-one-group jackknife; ``stats`` has one row of additive sums per group."""
    total = stats.sum(axis=0)
    full = estimator(total)
    g = len(stats)
    if g < 2:
        return full, math.inf
    loo = np.array([estimator(total - s) for s in stats])
    var = (g - 1) / g * float(((loo - loo.mean()) ** 2).sum())
    return full, math.sqrt(var)


def _cov_from_sums(s: np.ndarray) -> float:
    n, s1, s2, s12 = s
    return s12 / n - (s1 / n) * (s2 / n)


def _sums(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    return np.array([x1.size, math.fsum(x1.ravel()), math.fsum(x2.ravel()), math.fsum((x1 * x2).ravel())])


def time_correlations(sampler: SRBSampler, f1: str | Observable, f2: str | Observable,
                      lags: Sequence[int], steps: int) -> list[CorrelationEstimate]:
    """Covariances ``E[F1(theta_0(x)) F2(theta_lag(x))]`` along one orbit.

    Every site contributes a time series; pairs ``(t, t + lag)`` are averaged
    over all overlapping windows and all sites. Errors come from a block
    jackknife over time blocks of ``4 * max(lags)`` steps.
    """
    o1, o2 = get_observable(f1), get_observable(f2)
    max_lag = max(lags)
    if steps <= max_lag:
        raise ValueError(f"window of {steps} steps is shorter than lag {max_lag}")
    torus = sampler.cmap.torus
    X1 = np.empty((steps,) + sampler.geometry.shape)
    X2 = np.empty_like(X1)
    for t, th in enumerate(sampler.trajectory(steps)):
        v = _first(th, torus)
        X1[t] = o1.func(v)
        X2[t] = o2.func(v)
    block = max(4 * max_lag, 1)
    out = []
    for lag in lags:
        n_pairs = steps - lag
        a, b = X1[:n_pairs], X2[lag:]
        starts = range(0, n_pairs, block)
        stats = np.array([_sums(a[s:s + block], b[s:s + block]) for s in starts])
        cov, se = _jackknife(stats, _cov_from_sums)
        tot = stats.sum(axis=0)
        m12 = tot[3] / tot[0]
        out.append(CorrelationEstimate((o1.name, o2.name), lag, 0, m12, m12 - cov, cov, se, int(tot[0])))
    return out


def space_correlations(sampler: SRBSampler, f1: str | Observable, f2: str | Observable,
                       separations: Sequence[int], n_samples: int, n_groups: int = 32) -> list[CorrelationEstimate]:
    """Equal-time covariances between sites ``x`` and ``x + r e_1`` over independent samples."""
    o1, o2 = get_observable(f1), get_observable(f2)
    if max(separations) >= sampler.geometry.M:
        raise ValueError("separation exceeds the box")
    torus = sampler.cmap.torus
    per_sample = []
    for _ in range(n_samples):
        v = _first(sampler.draw(), torus)
        a = o1.func(v)
        b = o2.func(v)
        per_sample.append([_sums(a, np.roll(b, -r, axis=0)) for r in separations])
    S = np.array(per_sample)                          # (n_samples, n_sep, 4)
    groups = np.array_split(np.arange(n_samples), min(n_groups, n_samples))
    out = []
    for i, r in enumerate(separations):
        stats = np.array([S[g, i].sum(axis=0) for g in groups])
        cov, se = _jackknife(stats, _cov_from_sums)
        tot = stats.sum(axis=0)
        m12 = tot[3] / tot[0]
        out.append(CorrelationEstimate((o1.name, o2.name), 0, int(r), m12, m12 - cov, cov, se, int(tot[0])))
    return out


def correlation(sampler: SRBSampler, f1: str | Observable, f2: str | Observable,
                lag: int = 0, separation: int = 0, n_samples: int = 64, steps: int = 1024) -> CorrelationEstimate:
    """Single covariance at time ``lag`` (along an orbit) or spatial ``separation``."""
    if lag and separation:
        raise ValueError("give either a time lag or a spatial separation")
    if lag:
        return time_correlations(sampler, f1, f2, [lag], steps)[0]
    return space_correlations(sampler, f1, f2, [separation], n_samples)[0]


def fit_decay(estimates: Sequence[CorrelationEstimate]) -> DecayFit:
    """Exponential fit of ``|cov|`` against lag (or separation) with jackknife weights."""
    r = [e.lag or e.separation for e in estimates]
    return decay_rate_fit(r, [abs(e.covariance) for e in estimates], [e.stderr for e in estimates])


@dataclass(frozen=True)
class ProductBoundReport:
    k: int
    R: int
    ratio: float
    ratio_stderr: float
    slack: float
    slack_stderr: float
    count: int


def product_bound_check(sampler: SRBSampler, f: str | Observable, k: int, R: int,
                        n_samples: int, n_groups: int = 32) -> ProductBoundReport:
    """Compare ``E[prod_i F(theta(x + i R e_1))]`` with ``prod_i E[F]``.

    ``slack`` is the smallest per-factor exponent ``s >= 0`` with
    ``E[prod F] <= prod(E[F] e^s)``, i.e. ``max(0, log(ratio) / k)``.
    """
    obs = get_observable(f)
    if not obs.nonnegative:
        raise ValueError(f"observable {obs.name!r} is not nonnegative")
    if k < 1 or (k - 1) * R >= sampler.geometry.M:
        raise ValueError("sites do not fit in the box")
    torus = sampler.cmap.torus
    rows = []
    for _ in range(n_samples):
        F = obs.func(_first(sampler.draw(), torus))
        prod = np.ones_like(F)
        for i in range(k):
            prod = prod * np.roll(F, -i * R, axis=0)
        rows.append([F.size, math.fsum(F.ravel()), math.fsum(prod.ravel())])
    S = np.array(rows)
    groups = np.array_split(np.arange(n_samples), min(n_groups, n_samples))
    stats = np.array([S[g].sum(axis=0) for g in groups])

    def ratio(s):
        return (s[2] / s[0]) / (s[1] / s[0]) ** k

    def log_ratio(s):
        return math.log(ratio(s)) / k

    rho, rho_se = _jackknife(stats, ratio)
    lr, lr_se = _jackknife(stats, log_ratio)
    return ProductBoundReport(k, R, rho, rho_se, max(0.0, lr), lr_se, int(S[:, 0].sum()))


CSV_COLUMNS = ("observables", "lag", "separation", "covariance", "stderr", "n")


def correlation_rows(estimates: Sequence[CorrelationEstimate]) -> list[list]:
    return [["/".join(e.observables), e.lag, e.separation, repr(float(e.covariance)),
             repr(float(e.stderr)), e.count] for e in estimates]


def write_correlation_csv(path, estimates: Sequence[CorrelationEstimate]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        w.writerows(correlation_rows(estimates))
