import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmldiff.lattice import (
    CurrentModel,
    EnergyField,
    LatticeGeometry,
    LocalChaoticMap,
    PositivityError,
    SnapshotBudgetError,
    ThetaField,
    bond_currents,
    divergence,
    from_flat,
    run_trajectory,
    step_energy,
    step_theta,
    to_flat,
    wrap,
)
from cmldiff.rwre import TranslationKernel
from cmldiff.rg import position_power


def test_geometry_rejects_bad_sizes():
    with pytest.raises(ValueError):
        LatticeGeometry(4, 8)
    with pytest.raises(ValueError):
        LatticeGeometry(1, 1)


def test_displacement_is_minimum_image():
    g = LatticeGeometry(1, 8)
    assert g.displacement((0,))[0].tolist() == [0, 1, 2, 3, -4, -3, -2, -1]


def test_divergence_constant_current_vanishes():
    g = LatticeGeometry(2, 5)
    assert np.all(divergence(np.full((2, 5, 5), 0.7), g) == 0)


def test_divergence_hand_example():
    g = LatticeGeometry(1, 4)
    out = divergence(np.array([[0.0, 1.0, 0.0, 0.0]]), g)
    assert out.tolist() == [1.0, -1.0, 0.0, 0.0]


def test_divergence_shape_mismatch():
    with pytest.raises(ValueError):
        divergence(np.zeros((1, 4)), LatticeGeometry(2, 4))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_divergence_sums_to_zero(d, M, seed):
    g = LatticeGeometry(d, M)
    J = np.random.default_rng(seed).normal(size=(d,) + g.shape)
    assert abs(math.fsum(divergence(J, g).ravel())) <= 1e-12 * max(1.0, np.abs(J).sum())


def test_wrap_never_returns_one():
    x = np.array([1.0 - 1e-17, -1e-300, 3.0, -0.25])
    y = wrap(x)
    assert np.all((y >= 0) & (y < 1))
    assert y[3] == 0.75


def test_doubling_uncoupled():
    g = LatticeGeometry(1, 6)
    th = ThetaField(g, np.full(6, 0.3))
    assert np.allclose(step_theta(th, LocalChaoticMap()).values, 0.6, atol=1e-15)


def test_cat_uncoupled():
    g = LatticeGeometry(2, 3)
    th = ThetaField(g, np.full((3, 3, 2), 0.5))
    out = step_theta(th, LocalChaoticMap("cat")).values
    assert np.allclose(out[..., 0], 0.5) and np.allclose(out[..., 1], 0.0)


def test_cat_matrix_is_hyperbolic():
    cm = LocalChaoticMap("cat")
    assert cm.expansion == pytest.approx((3 + math.sqrt(5)) / 2)


def test_map_variant_must_match_field():
    g = LatticeGeometry(1, 4)
    with pytest.raises(ValueError):
        step_theta(ThetaField(g, np.zeros(4)), LocalChaoticMap("cat"))


@pytest.mark.parametrize("coupling", ["diffusive", "antisymmetric"])
def test_coupling_perturbation_is_order_kappa(coupling):
    g = LatticeGeometry(2, 8)
    th = ThetaField.uniform(g, np.random.default_rng(0))
    base = step_theta(th, LocalChaoticMap()).values
    for kappa in (0.01, 0.05):
        cm = LocalChaoticMap(kappa=kappa, coupling=coupling)
        diff = np.abs(step_theta(th, cm).values - base)
        diff = np.minimum(diff, 1 - diff)
        assert diff.max() <= cm.coupling_bound(2) + 1e-15


def test_diffusive_coupling_commutes_with_reflection():
    g = LatticeGeometry(1, 16)
    th = np.random.default_rng(1).random(16)
    cm = LocalChaoticMap(kappa=0.05)
    a = cm.psi(th[::-1].copy(), g)
    b = cm.psi(th, g)[::-1]
    assert np.allclose(a, b, atol=1e-15)


def test_tail_refresh_keeps_orbits_alive():
    g = LatticeGeometry(1, 32)
    th = ThetaField.uniform(g, np.random.default_rng(0))
    cm = LocalChaoticMap()
    rng = np.random.default_rng(1)
    for _ in range(200):
        th = step_theta(th, cm, rng)
    assert np.unique(th.values).size == 32
    dead = ThetaField.uniform(g, np.random.default_rng(0))
    for _ in range(80):
        dead = step_theta(dead, cm)
    assert np.all(dead.values == 0.0)


def test_constant_energy_is_fixed_without_noise():
    g = LatticeGeometry(2, 6)
    th = ThetaField.uniform(g, np.random.default_rng(0))
    E = EnergyField(g, np.full(g.shape, 2.5))
    assert np.allclose(step_energy(E, th, CurrentModel(0.125, 0.0)).values, 2.5, rtol=0, atol=1e-15)


def test_spike_one_hop():
    g = LatticeGeometry(1, 8)
    th = ThetaField(g, np.zeros(8))
    out = step_energy(EnergyField(g, g.spike()), th, CurrentModel(0.25, 0.0)).values
    assert out.tolist() == [0.5, 0.25, 0, 0, 0, 0, 0, 0.25]


def test_zero_energy_is_preserved():
    g = LatticeGeometry(2, 5)
    th = ThetaField.uniform(g, np.random.default_rng(0))
    out = step_energy(EnergyField(g, np.zeros(g.shape)), th, CurrentModel(0.125, 0.03))
    assert np.all(out.values == 0)


def test_positivity_guard():
    g = LatticeGeometry(1, 4)
    th = ThetaField(g, np.zeros(4))
    with pytest.raises(PositivityError):
        step_energy(EnergyField(g, g.spike()), th, CurrentModel(0.45, 0.1))


def test_energy_field_validation():
    g = LatticeGeometry(1, 4)
    with pytest.raises(ValueError):
        EnergyField(g, [1.0, -1e-300, 0.0, 0.0])
    with pytest.raises(ValueError):
        EnergyField(g, [1.0, np.nan, 0.0, 0.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(3, 7), st.integers(0, 2**32 - 1),
       st.floats(0.0, 1.0), st.sampled_from(["cos", "biased"]))
def test_step_conserves_and_stays_positive(d, M, seed, frac, obs):
    g = LatticeGeometry(d, M)
    rng = np.random.default_rng(seed)
    a = 1 / (4 * d)
    model = CurrentModel(a, frac * a / 4, obs)
    E = EnergyField(g, rng.exponential(size=g.shape) * (rng.random(g.shape) < 0.5))
    th = ThetaField.uniform(g, rng)
    out = step_energy(E, th, model)
    assert out.values.min() >= 0.0
    assert abs(out.mass() - E.mass()) <= 8 * np.finfo(float).eps * max(E.mass(), 1e-300)


def test_current_divergence_matches_update():
    g = LatticeGeometry(2, 6)
    rng = np.random.default_rng(3)
    E = EnergyField(g, rng.random(g.shape))
    th = ThetaField.uniform(g, rng)
    model = CurrentModel(0.125, 0.03)
    J = bond_currents(E, th, model)
    assert np.allclose(E.values + divergence(J, g), step_energy(E, th, model).values, atol=1e-15)


def test_translation_covariance():
    g = LatticeGeometry(2, 6)
    rng = np.random.default_rng(4)
    E = rng.random(g.shape)
    th = rng.random(g.shape)
    model = CurrentModel(0.125, 0.03)
    v = (2, -1)
    shifted = step_energy(EnergyField(g, g.shift(E, v)), ThetaField(g, g.shift(th, v)), model).values
    direct = g.shift(step_energy(EnergyField(g, E), ThetaField(g, th), model).values, v)
    assert np.array_equal(shifted, direct)


def test_theta_step_ignores_energy():
    g = LatticeGeometry(1, 16)
    th0 = ThetaField.uniform(g, np.random.default_rng(0))
    model, cm = CurrentModel(0.25, 0.06), LocalChaoticMap(kappa=0.03)
    a = run_trajectory(EnergyField(g, g.spike()), th0, model, cm, 5)
    b = run_trajectory(EnergyField(g, np.full(16, 3.0)), th0, model, cm, 5)
    assert np.array_equal(a.thetas[-1], b.thetas[-1])


def test_zero_steps_returns_initial_state():
    g = LatticeGeometry(1, 8)
    E0 = EnergyField(g, g.spike())
    th0 = ThetaField(g, np.full(8, 0.1))
    traj = run_trajectory(E0, th0, CurrentModel(), LocalChaoticMap(), 0)
    assert traj.times == (0,)
    assert np.array_equal(traj.energies[0], E0.values)
    assert np.array_equal(traj.thetas[0], th0.values)


def test_noiseless_run_is_convolution():
    g = LatticeGeometry(1, 32)
    E0 = EnergyField(g, g.spike())
    th0 = ThetaField.uniform(g, np.random.default_rng(0))
    traj = run_trajectory(E0, th0, CurrentModel(0.25, 0.0), LocalChaoticMap(), 9)
    oracle = position_power(TranslationKernel.hopping(1, 0.25), 9, g)
    assert np.allclose(traj.energies[-1], oracle, atol=1e-15)


def test_monitor_sees_every_step():
    g = LatticeGeometry(1, 16)
    seen = []
    run_trajectory(EnergyField(g, g.spike()), ThetaField(g, np.zeros(16)), CurrentModel(0.25, 0.05),
                   LocalChaoticMap(), 7, monitor=lambda t, E: seen.append(t))
    assert seen == list(range(1, 8))


def test_snapshot_budget():
    g = LatticeGeometry(1, 64)
    with pytest.raises(SnapshotBudgetError):
        run_trajectory(EnergyField(g, g.spike()), ThetaField(g, np.zeros(64)), CurrentModel(),
                       LocalChaoticMap(), 100, range(101), max_snapshot_bytes=1000)


def test_flat_layout_x_fastest():
    g = LatticeGeometry(2, 3)
    v = np.arange(9.0).reshape(3, 3)
    flat = to_flat(v)
    assert flat.dtype == np.dtype("<f8")
    assert flat[:3].tolist() == [0.0, 3.0, 6.0]
    assert np.array_equal(from_flat(flat, g), v)
