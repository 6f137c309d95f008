"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line."""
import json
import math
import time
import warnings

import numpy as np

from cmldiff import cli
from cmldiff.lattice import CurrentModel, EnergyField, LatticeGeometry, LocalChaoticMap, ThetaField, run_trajectory
from cmldiff.rg import _L_weights, diffusion_constant, estimate_effective_D, full_rg_experiment, linear_L_apply, \
    pure_T_flow, required_box_side
from cmldiff.rwre import TranslationKernel, validate_assumptions
from cmldiff.seeding import stream
from cmldiff.srb import SRBSampler, fit_decay, time_correlations
from cmldiff.verify import LowDimensionWarning, oracle_distance, scaling_limit_test

DEFAULT = CurrentModel(0.25, 1 / 16)
HOP1 = TranslationKernel.hopping(1, 0.25)
HOP2 = TranslationKernel.hopping(2, 0.125)
_trajectory = {}


def _default_run():
    """10^4 steps of the default d=1 model on M=256, monitored at every step (shared by criteria 1 and 2)."""
    if not _trajectory:
        g = LatticeGeometry(1, 256)
        rng = stream(0, "acceptance", 1)
        E0 = EnergyField(g, rng.exponential(size=256))
        th = ThetaField.uniform(g, rng)
        m0 = math.fsum(E0.values)
        worst = {"rel_err": 0.0, "min_E": float(E0.values.min())}

        def monitor(t, E):
            worst["rel_err"] = max(worst["rel_err"], abs(math.fsum(E) - m0) / m0)
            worst["min_E"] = min(worst["min_E"], float(E.min()))

        t0 = time.perf_counter()
        run_trajectory(E0, th, DEFAULT, LocalChaoticMap(), 10_000, rng=rng, monitor=monitor)
        worst["seconds"] = time.perf_counter() - t0
        _trajectory.update(worst)
    return _trajectory


def test_criterion_01_conservation(criterion):
    r = _default_run()
    ok = r["rel_err"] <= 1e-12 and r["seconds"] < 5.0
    criterion(1, "conservation", ok, f"max rel mass error {r['rel_err']:.2e} (tol 1e-12), {r['seconds']:.2f}s (< 5s)")


def test_criterion_02_positivity(criterion):
    r = _default_run()
    criterion(2, "positivity", r["min_E"] >= 0.0, f"min energy over 1e4 steps {r['min_E']:.4g}")


def test_criterion_03_pure_flow(criterion):
    t0 = time.perf_counter()
    flow = pure_T_flow(HOP1, 2, 5)
    dt = time.perf_counter() - t0
    dist = flow[-1].gauss_sup_dist
    criterion(3, "pure T flow", dist <= 1e-3 and dt < 1.0, f"sup distance at n=5 {dist:.2e} (tol 1e-3), {dt:.3f}s (< 1s)")


def test_criterion_04_diffusion_constant(criterion):
    exact = [diffusion_constant(HOP1), diffusion_constant(HOP2)]
    est = []
    for T, d in ((HOP1, 1), (HOP2, 2)):
        M = required_box_side(0.5, 2, 5, d)
        f = pure_T_flow(T, 2, 5, box=LatticeGeometry(d, M), n_k=65 if d == 2 else None)[-1]
        est.append(estimate_effective_D(f.as_field()).D)
    ok = exact == [0.5, 0.5] and all(abs(e - 0.5) <= 1e-3 for e in est)
    criterion(4, "diffusion constant", ok, f"D0 exact {exact}, estimated at n=5 {[round(e, 7) for e in est]} (tol 1e-3)")


def _variance_ratio(L, M, replicas, rng):
    geo = LatticeGeometry(2, M)
    W = _L_weights(HOP2, geo, L, (0, 0), (0, 0))
    chunk = max(1, int(2e7 // W.size))
    out, drawn, done = [], [], 0
    while done < replicas:
        k = min(chunk, replicas - done)
        b = rng.standard_normal((k,) + W.shape)
        drawn.append(b.var())
        out.append(linear_L_apply(b, HOP2, L, geo, points=[((0, 0), (0, 0))])[:, 0])
        done += k
    out = np.concatenate(out)
    return out.var(ddof=1) / np.mean(drawn), float((W**2).sum())


def test_criterion_05_linear_contraction(criterion):
    t0 = time.perf_counter()
    rng = stream(0, "acceptance", 5)
    r4, exact4 = _variance_ratio(4, 20, 10_000, rng)
    r8, exact8 = _variance_ratio(8, 40, 2_000, rng)
    dt = time.perf_counter() - t0
    ok = r4 <= 10 / 16 and r8 < r4 and dt < 60.0
    criterion(5, "linear RG contraction", ok,
              f"Var ratio L=4 {r4:.4f} (exact {exact4:.4f}, tol {10 / 16}), L=8 {r8:.4f} (exact {exact8:.4f}), {dt:.1f}s")


def test_criterion_06_eps_trend(criterion):
    g = LatticeGeometry(1, 512)
    strict = 0
    for s in range(32):
        res = full_rg_experiment(DEFAULT, LocalChaoticMap(), g, 4, 3, stream(0, "rgflow", s), seed=s)
        eps = [r.eps_n for r in res.records]
        strict += all(b < a for a, b in zip(eps, eps[1:]))
    frac = strict / 32
    criterion(6, "eps_n trend", frac >= 0.9, f"{strict}/32 seeds strictly decreasing ({frac:.0%}, need >= 90%)")


def test_criterion_07_weak_distances(criterion):
    g = LatticeGeometry(1, 512)
    E0 = EnergyField(g, g.spike())
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LowDimensionWarning)
        rep = scaling_limit_test(E0, DEFAULT, LocalChaoticMap(), 4, 3, range(32))
        clean = scaling_limit_test(E0, CurrentModel(0.25, 0.0), LocalChaoticMap(), 4, 3, [0])
    trend = rep.median_decreasing()
    gap = max(abs(clean.distances[0, -1, j] - oracle_distance(HOP1, g, 4, 3, G, clean.D_hat[0]))
              for j, G in enumerate(clean.tests))
    ok = all(trend.values()) and gap <= 1e-6
    criterion(7, "weak distances", ok, f"median decreasing {trend}, eps=0 oracle gap {gap:.1e} (tol 1e-6)")


def test_criterion_08_srb_correlations(criterion):
    t0 = time.perf_counter()
    g = LatticeGeometry(1, 1024)
    free = time_correlations(SRBSampler(LocalChaoticMap(), g, seed=0), "cos", "cos", range(1, 9), 2000)
    z = max(abs(e.z_score()) for e in free)
    coupled = time_correlations(SRBSampler(LocalChaoticMap(kappa=0.05), LatticeGeometry(1, 512), seed=1),
                                "sawtooth", "sawtooth", range(1, 9), 1500)
    fit = fit_decay(coupled)
    dt = time.perf_counter() - t0
    ok = z <= 4 and fit.m > 0 and fit.m_lower() > 0 and dt < 120
    criterion(8, "SRB correlations", ok,
              f"kappa=0 max |z| {z:.2f} (<= 4), kappa=0.05 m {fit.m:.3f} lower {fit.m_lower():.3f}, {dt:.1f}s")


def test_criterion_09_validators(criterion):
    g, cm = LatticeGeometry(1, 32), LocalChaoticMap()

    def failed(model):
        return validate_assumptions(model, cm, g, 64, stream(0, "acceptance", 9)).failed()

    got = {
        "default": failed(DEFAULT),
        "positivity": failed(CurrentModel(0.45, 0.1)),
        "symmetry": failed(CurrentModel(0.25, 1 / 16, "biased")),
        "aperiodicity": failed(CurrentModel(0.0, 0.0)),
    }
    ok = got["default"] == [] and all(got[k] == [k] for k in ("positivity", "symmetry", "aperiodicity"))
    criterion(9, "assumption validators", ok, f"failed checks per model {got}")


SMALL = {
    "geometry": {"d": 1, "M": 128},
    "model": {"a": 0.25, "eps": 0.0625},
    "rg": {"L": 2, "n_max": 3},
    "sampling": {"n_seeds": 4, "n_samples": 16, "steps": 64, "snapshot_every": 32,
                 "lags": [1, 2, 3], "separations": [1, 2]},
}


def test_criterion_10_determinism(tmp_path, criterion):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    mismatched = []
    for command in cli.COMMANDS:
        outs = {}
        for tag, threads in (("a", 1), ("b", 1), ("c", 8)):
            out = tmp_path / command / tag
            cli.main([command, "--config", str(cfg), "--out", str(out), "--seed", "3", "--threads", str(threads)])
            outs[tag] = {p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))}
        if not outs["a"] or outs["a"] != outs["b"] or outs["a"] != outs["c"]:
            mismatched.append(command)
    criterion(10, "determinism", not mismatched,
              f"{len(cli.COMMANDS)} commands rerun at threads 1,1,8; mismatched {mismatched}")
