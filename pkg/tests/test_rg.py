import math
import warnings

import numpy as np
import pytest

from cmldiff.lattice import CurrentModel, LatticeGeometry, LocalChaoticMap
from cmldiff.rg import (
    AperiodicityWarning,
    BoxSizeError,
    RGFlowRecord,
    ScaledField,
    circulant,
    diffusion_constant,
    estimate_effective_D,
    full_rg_experiment,
    gaussian_density,
    kernel_powers,
    linear_L_apply,
    position_power,
    pure_T_flow,
    required_box_side,
    rg_kernel_step,
    scale_field,
)
from cmldiff.rwre import EnvironmentKernel, TranslationKernel, generate_environment

HOP1 = TranslationKernel.hopping(1, 0.25)
HOP2 = TranslationKernel.hopping(2, 0.125)


def test_scale_field_identity_and_errors():
    g = LatticeGeometry(1, 12)
    E = ScaledField(g, np.random.default_rng(0).random(12), 2, 0)
    assert scale_field(E, 1) is E
    with pytest.raises(ValueError):
        scale_field(ScaledField(LatticeGeometry(1, 9), np.ones(9), 2, 0), 2)
    with pytest.raises(ValueError):
        scale_field(E, 2.5)


def test_scale_field_preserves_mass():
    g = LatticeGeometry(1, 16)
    E = ScaledField(g, np.random.default_rng(1).random(16), 2, 0)
    S = scale_field(E, 2)
    assert S.n == 1
    assert S.mass() == pytest.approx(E.mass(), rel=1e-15)
    assert np.array_equal(S.values, 2 * E.values)


def test_scale_field_spike():
    g = LatticeGeometry(2, 8)
    S = scale_field(ScaledField(g, g.spike(), 2, 0), 2)
    assert S.mass() == 1.0
    assert S.values[0, 0] == 4.0 and np.count_nonzero(S.values) == 1


def test_rg_step_identity_walk():
    g = LatticeGeometry(1, 6)
    ident = EnvironmentKernel(g, np.concatenate([np.ones((1, 1, 6)), np.zeros((1, 2, 6))], axis=1))
    K = rg_kernel_step([ident] * 4, 2)
    assert np.array_equal(K.matrix, np.eye(6))
    assert K.n == 1


def test_rg_step_matches_pure_flow():
    box = LatticeGeometry(1, 16)
    K = rg_kernel_step([circulant(HOP1.on_box(box))] * 4, 2, box)
    fk = pure_T_flow(HOP1, 2, 1, box=box)[0]
    assert np.max(np.abs(K.values()[:, 0] - fk.position())) <= 1e-12


def test_rg_step_random_environment_is_stochastic():
    g = LatticeGeometry(2, 4)
    env, _ = generate_environment(CurrentModel(0.125, 0.03), LocalChaoticMap(), g, 4, np.random.default_rng(0))
    slices = [EnvironmentKernel(g, env.weights[t:t + 1]) for t in range(4)]
    K = rg_kernel_step(slices, 2)
    assert np.max(np.abs(K.column_integrals() - 1.0)) <= 1e-14
    assert K.matrix.min() >= 0
    with pytest.raises(ValueError):
        rg_kernel_step(slices[:3], 2)


def test_diffusion_constant_examples():
    assert diffusion_constant(TranslationKernel(np.array([1.0]))) == 0.0
    assert diffusion_constant(HOP1) == 0.5
    assert diffusion_constant(HOP2) == 0.5


def test_pure_flow_d1_closed_form():
    flow = pure_T_flow(HOP1, 2, 5)
    k = flow[-1].k
    closed = np.cos(k / 2**6) ** (2 * 4**5)
    assert np.max(np.abs(flow[-1].values - closed)) <= 1e-12
    assert flow[-1].gauss_sup_dist <= 1e-3
    assert all(f.D0 == diffusion_constant(HOP1) for f in flow)


@pytest.mark.parametrize("T", [HOP1, HOP2])
def test_gauss_distance_nonincreasing(T):
    d = [f.gauss_sup_dist for f in pure_T_flow(T, 2, 5)]
    assert all(b <= a for a, b in zip(d, d[1:]))


def test_fourier_kernel_invariants():
    f = pure_T_flow(HOP2, 2, 2, n_k=33)[-1]
    assert f.values[16, 16] == pytest.approx(1.0, abs=1e-15)
    assert np.allclose(f.values, np.conj(f.values[::-1, ::-1]), atol=1e-14)
    assert np.max(np.abs(f.values.imag)) <= 1e-14


def test_sampled_gaussian_is_fixed_point():
    u = np.arange(-30, 31)
    w = np.exp(-u**2 / 8.0)
    T = TranslationKernel(w / w.sum())
    assert diffusion_constant(T) == pytest.approx(4.0, rel=1e-12)
    assert max(f.gauss_sup_dist for f in pure_T_flow(T, 2, 4)) <= 1e-12


def test_fourier_position_roundtrip():
    box = LatticeGeometry(2, 16)
    for f in pure_T_flow(HOP2, 2, 2, box=box, n_k=9):
        site = f.position() / 2.0 ** (2 * f.n)
        assert np.max(np.abs(np.fft.fftn(site) - f.box_spectrum)) <= 1e-12


def test_position_space_oracle_agrees():
    box = LatticeGeometry(1, 32)
    f = pure_T_flow(HOP1, 2, 2, box=box)[-1]
    assert np.max(np.abs(f.position() / 4 - position_power(HOP1, 16, box))) <= 1e-12


def test_aperiodic_kernel_flagged():
    with pytest.warns(AperiodicityWarning):
        pure_T_flow(TranslationKernel(np.array([0.0, 1.0, 0.0])), 2, 1)
    with pytest.warns(AperiodicityWarning):
        pure_T_flow(TranslationKernel(np.array([0.5, 0.0, 0.5])), 2, 1)


def _random_b(rng, batch, L, g):
    return rng.normal(size=batch + (L * L, len(g.offsets)) + g.shape)


def test_linear_L_zero_and_linearity():
    g = LatticeGeometry(1, 8)
    rng = np.random.default_rng(0)
    assert np.all(linear_L_apply(np.zeros((4, 3, 8)), HOP1, 2, g) == 0)
    b1, b2 = _random_b(rng, (), 2, g), _random_b(rng, (), 2, g)
    lhs = linear_L_apply(1.5 * b1 - 0.3 * b2, HOP1, 2, g)
    rhs = 1.5 * linear_L_apply(b1, HOP1, 2, g) - 0.3 * linear_L_apply(b2, HOP1, 2, g)
    assert np.max(np.abs(lhs - rhs)) <= 1e-14


def test_linear_L_window_mismatch():
    g = LatticeGeometry(1, 8)
    with pytest.raises(ValueError):
        linear_L_apply(np.zeros((3, 3, 8)), HOP1, 2, g)


def test_linear_L_matches_dense_products():
    g = LatticeGeometry(1, 6)
    L = 2
    b = _random_b(np.random.default_rng(1), (), L, g)
    pw = kernel_powers(HOP1, g, L * L)
    expect = np.zeros((6, 6))
    for i in range(L * L):
        bi = EnvironmentKernel(g, b[i][None]).dense(0)
        expect += circulant(pw[L * L - 1 - i]) @ bi @ circulant(pw[i])
    expect *= L ** (g.d - 1)
    assert np.max(np.abs(linear_L_apply(b, HOP1, L, g) - expect)) <= 1e-13
    pts = [((0,), (0,)), ((2,), (5,))]
    got = linear_L_apply(b[None], HOP1, L, g, points=pts)
    assert np.allclose(got[0], [expect[0, 0], expect[2, 5]], atol=1e-13)


def test_linear_L_mean_zero_ensemble():
    g = LatticeGeometry(2, 6)
    b = _random_b(np.random.default_rng(2), (4000,), 2, g)
    out = linear_L_apply(b, HOP2, 2, g, points=[((0, 0), (0, 0))])[:, 0]
    assert abs(out.mean()) <= 4 * out.std(ddof=1) / math.sqrt(out.size)


def test_effective_D_gaussian_profile():
    g = LatticeGeometry(1, 256)
    x = g.displacement()[0] / 16.0
    prof = ScaledField(g, gaussian_density(x**2, 0.5, 1), 2, 4)
    est = estimate_effective_D(prof)
    assert abs(est.D - 0.5) <= 1e-3 and est.ok


def test_effective_D_noiseless_flow():
    f = pure_T_flow(HOP1, 2, 5, box=LatticeGeometry(1, 256))[-1]
    assert abs(estimate_effective_D(f.as_field()).D - 0.5) <= 1e-3


def test_effective_D_white_noise_fails():
    g = LatticeGeometry(1, 256)
    est = estimate_effective_D(ScaledField(g, np.random.default_rng(0).random(256), 2, 3))
    assert not est.ok
    assert est.uncertainty > 0.5 * est.D


def test_effective_D_rejects_bad_mass():
    g = LatticeGeometry(1, 8)
    with pytest.raises(ValueError):
        estimate_effective_D(ScaledField(g, np.zeros(8)))
    with pytest.raises(ValueError):
        estimate_effective_D(ScaledField(g, -np.ones(8)))
    with pytest.raises(ValueError):
        estimate_effective_D([])


def test_box_rule():
    assert required_box_side(0.5, 4, 3) == math.ceil(10 * math.sqrt(0.5 * 4096))
    with pytest.raises(BoxSizeError):
        full_rg_experiment(CurrentModel(0.25, 0.0), LocalChaoticMap(), LatticeGeometry(1, 64), 4, 3,
                           np.random.default_rng(0))


def test_noiseless_experiment():
    res = full_rg_experiment(CurrentModel(0.25, 0.0), LocalChaoticMap(), LatticeGeometry(1, 128), 2, 3,
                             np.random.default_rng(0))
    assert [r.n for r in res.records] == [1, 2, 3]
    for r in res.records:
        assert r.eps_n == 0.0
        assert r.D_n == pytest.approx(0.5, abs=1e-12)
        assert r.mass_err <= 1e-13


def test_noisy_experiment_band_and_mass():
    res = full_rg_experiment(CurrentModel(0.25, 1 / 16), LocalChaoticMap(), LatticeGeometry(1, 128), 2, 3,
                             np.random.default_rng(1), seed=7, column_stride=2)
    assert all(r.in_elliptic_band for r in res.records)
    assert all(r.mass_err <= 1e-12 for r in res.records)
    assert all(r.eps_n > 0 for r in res.records)
    row = res.records[0].row()
    assert row[:3] == [7, 1, 2] and len(row) == len(RGFlowRecord.CSV_COLUMNS)


def test_experiment_is_deterministic():
    args = (CurrentModel(0.25, 1 / 16), LocalChaoticMap(), LatticeGeometry(1, 64), 2, 2)
    a = full_rg_experiment(*args, np.random.default_rng(5))
    b = full_rg_experiment(*args, np.random.default_rng(5))
    assert [r.row() for r in a.records] == [r.row() for r in b.records]


def test_budget_gives_partial_records():
    res = full_rg_experiment(CurrentModel(0.25, 1 / 16), LocalChaoticMap(), LatticeGeometry(1, 512), 4, 3,
                             np.random.default_rng(0), deadline=0.0)
    assert res.partial and len(res.records) < 3
