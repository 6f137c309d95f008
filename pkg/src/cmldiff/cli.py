"""Command-line entry point: ``cmldiff {simulate,rgflow,rwre,correlations,verify}``.

Each command reads a JSON config, derives every random stream from one
64-bit master seed and writes CSV tables whose bodies depend only on
(config, seed). Run metadata (resolved config, content hash, timestamp)
goes to a ``<table>.meta.json`` sidecar.

Exit codes: 0 ok, 2 config error, 3 validator failure, 4 budget exhausted.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import os
import sys
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .lattice import (CurrentModel, EnergyField, LatticeGeometry, LocalChaoticMap, PositivityError, ThetaField,
                      run_trajectory)
from .norms import decay_rate_fit
from .rg import BoxSizeError, RGFlowRecord, full_rg_experiment, pure_T_flow
from .rwre import TranslationKernel, generate_environment, initial_theta, save_environment, validate_assumptions
from .seeding import MASK64, ordered_map, stream
from .srb import SRBSampler, correlation_rows, space_correlations, time_correlations
from .srb import CSV_COLUMNS as CORR_COLUMNS
from .verify import default_test_functions, scaling_limit_test

EXIT_OK, EXIT_CONFIG, EXIT_VALIDATOR, EXIT_BUDGET = 0, 2, 3, 4
CONSERVATION_TOL = 1e-12


class BudgetError(RuntimeError):
    pass


@dataclass
class RunContext:
    config: ExperimentConfig
    seed: int
    threads: int
    out: Path
    deadline: float | None
    command: str

    @property
    def geometry(self) -> LatticeGeometry:
        g = self.config.geometry
        return LatticeGeometry(g.d, g.M)

    @property
    def model(self) -> CurrentModel:
        m = self.config.model
        return CurrentModel(m.a, m.eps, m.observable)

    @property
    def cmap(self) -> LocalChaoticMap:
        m = self.config.model
        return LocalChaoticMap(m.variant, m.kappa, m.coupling)

    def meta(self, **extra) -> dict:
        return {
            "command": self.command,
            "package_version": __version__,
            "seed": self.seed,
            "config": self.config.model_dump(mode="json"),
            "config_hash": self.config.content_hash(),
            "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            **extra,
        }

    def write_table(self, name: str, columns, rows, **extra) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / f"{name}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            w.writerows(rows)
        self.write_json(f"{name}.meta.json", self.meta(table=path.name, **extra))
        return path

    def write_json(self, name: str, doc: dict) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / name
        path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")
        return path


def _json_default(o):
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _diagnose(kind: str, details) -> None:
    print(json.dumps({"error": kind, "details": details}, default=_json_default), file=sys.stderr)


def _validate(ctx: RunContext, role: str = "validate"):
    return validate_assumptions(ctx.model, ctx.cmap, ctx.geometry, ctx.config.sampling.n_samples,
                                stream(ctx.seed, role), ctx.config.sampling.burn_in)


# ----------------------------------------------------------------------------
# commands

def cmd_simulate(ctx: RunContext) -> int:
    cfg, geo, model, cmap = ctx.config, ctx.geometry, ctx.model, ctx.cmap
    steps, every = cfg.sampling.steps, cfg.sampling.snapshot_every
    times = list(range(0, steps + 1, every)) + ([steps] if steps % every else [])

    def job(replica):
        rng = stream(ctx.seed, "simulate", replica)
        th0 = ThetaField(geo, initial_theta(cmap, geo, rng, cfg.sampling.burn_in))
        E0 = EnergyField(geo, geo.spike())
        m0 = E0.mass()
        track = {"err": 0.0, "min": float(E0.values.min())}

        def monitor(t, E):
            track["err"] = max(track["err"], abs(float(E.sum()) - m0) / m0)
            track["min"] = min(track["min"], float(E.min()))

        traj = run_trajectory(E0, th0, model, cmap, steps, times, rng, monitor=monitor)
        return traj, track

    report = _validate(ctx)
    ctx.write_json("assumptions.json", {"passed": report.passed, "checks": report.as_dict(),
                                        "config_hash": ctx.config.content_hash()})
    try:
        results = ordered_map(job, range(cfg.sampling.n_seeds), ctx.threads)
    except PositivityError as err:
        _diagnose("validator", {"positivity": str(err), "failed": report.failed()})
        return EXIT_VALIDATOR
    snap_rows, cons_rows = [], []
    ok = report.passed
    for replica, (traj, track) in enumerate(results):
        for t, E in zip(traj.times, traj.energies):
            flat = E.ravel()
            snap_rows += [[replica, t, i, repr(float(v))] for i, v in enumerate(flat)]
        good = track["err"] <= CONSERVATION_TOL and track["min"] >= 0.0
        ok &= good
        cons_rows.append([replica, steps, repr(track["err"]), repr(track["min"]), int(good)])
    ctx.write_table("snapshots", ("seed", "t", "site", "E"), snap_rows)
    ctx.write_table("conservation", ("seed", "steps", "max_rel_mass_err", "min_E", "ok"), cons_rows)
    if not ok:
        _diagnose("validator", {"failed": report.failed(),
                                "conservation": [r for r in cons_rows if not r[-1]]})
        return EXIT_VALIDATOR
    return EXIT_OK


def cmd_rgflow(ctx: RunContext) -> int:
    cfg, geo = ctx.config, ctx.geometry

    def job(replica):
        return full_rg_experiment(ctx.model, ctx.cmap, geo, cfg.rg.L, cfg.rg.n_max,
                                  stream(ctx.seed, "rgflow", replica), seed=replica,
                                  burn_in=cfg.sampling.burn_in, column_stride=cfg.rg.column_stride,
                                  window_cells=cfg.rg.window_cells, deadline=ctx.deadline)

    results = ordered_map(job, range(cfg.sampling.n_seeds), ctx.threads)
    rows = [r.row() for res in results for r in res.records]
    partial = any(res.partial for res in results)
    flagged = [[r.seed, r.n] for res in results for r in res.records if not r.in_elliptic_band]
    ctx.write_table("rgflow", RGFlowRecord.CSV_COLUMNS, rows, partial=partial, outside_elliptic_band=flagged)
    if partial:
        _diagnose("budget", {"partial": True, "records": len(rows)})
        return EXIT_BUDGET
    return EXIT_OK


def cmd_rwre(ctx: RunContext) -> int:
    cfg, geo = ctx.config, ctx.geometry
    t_max = cfg.sampling.steps
    need = t_max * len(geo.offsets) * geo.n_sites * 8
    if need > cfg.output.max_bytes:
        raise BudgetError(f"environment needs {need} bytes, budget is {cfg.output.max_bytes}")
    env, _ = generate_environment(ctx.model, ctx.cmap, geo, t_max, stream(ctx.seed, "rwre"),
                                  cfg.sampling.burn_in, check=False)
    ctx.out.mkdir(parents=True, exist_ok=True)
    save_environment(ctx.out / "environment.bin", env, ctx.model, ctx.cmap, ctx.seed)
    w = env.weights
    col_err = np.abs(w.sum(axis=1) - 1.0).reshape(t_max, -1).max(axis=1)
    w_min = w.reshape(t_max, -1).min(axis=1)
    rows = [[t, repr(float(col_err[t])), repr(float(w_min[t]))] for t in range(t_max)]
    ctx.write_table("environment_summary", ("t", "column_sum_err", "min_weight"), rows)
    report = _validate(ctx)
    ctx.write_json("assumptions.json", {"passed": report.passed, "checks": report.as_dict(),
                                        "config_hash": ctx.config.content_hash()})
    if not report.passed:
        _diagnose("validator", {"failed": report.failed(), "checks": report.as_dict()})
        return EXIT_VALIDATOR
    return EXIT_OK


def cmd_correlations(ctx: RunContext) -> int:
    cfg, geo = ctx.config, ctx.geometry
    s = cfg.sampling
    obs = s.observable
    if s.steps <= max(s.lags):
        raise ConfigError([f"sampling.steps: window of {s.steps} steps is shorter than lag {max(s.lags)}"])
    if max(s.separations) >= geo.M:
        raise ConfigError([f"sampling.separations: {max(s.separations)} does not fit in the box"])
    jobs = [("time", 0), ("space", 1)]

    def job(item):
        kind, replica = item
        sampler = SRBSampler(ctx.cmap, geo, s.burn_in, ctx.seed, replica, role="correlations")
        if kind == "time":
            return time_correlations(sampler, obs, obs, s.lags, s.steps)
        return space_correlations(sampler, obs, obs, s.separations, s.n_samples)

    tc, sc = ordered_map(job, jobs, ctx.threads)
    fit = None
    try:
        f = decay_rate_fit([e.lag for e in tc], [abs(e.covariance) for e in tc], [e.stderr for e in tc])
        fit = {"C": f.C, "m": f.m, "m_stderr": f.m_stderr, "m_lower": f.m_lower()}
    except ValueError as err:
        fit = {"error": str(err)}
    ctx.write_table("correlations", CORR_COLUMNS, correlation_rows(tc + sc), time_decay_fit=fit)
    return EXIT_OK


def cmd_verify(ctx: RunContext) -> int:
    cfg, geo, model = ctx.config, ctx.geometry, ctx.model
    names = cfg.verification.test_functions
    available = {G.name: G for G in default_test_functions(geo.d)}
    unknown = [n for n in names if n not in available]
    if unknown:
        raise ConfigError([f"verification.test_functions: unknown {unknown}; choose from {sorted(available)}"])
    E0 = EnergyField(geo, geo.spike())
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = scaling_limit_test(E0, model, ctx.cmap, cfg.rg.L, cfg.rg.n_max, range(cfg.sampling.n_seeds),
                                    ctx.seed, [available[n] for n in names], cfg.verification.delta,
                                    cfg.sampling.burn_in, deadline=ctx.deadline,
                                    config=cfg.model_dump(mode="json"), threads=ctx.threads)
        flow = pure_T_flow(TranslationKernel.hopping(geo.d, model.a), cfg.rg.L, cfg.rg.n_max)
    doc = report.as_dict()
    doc["pure_flow_gauss_sup_dist"] = [fk.gauss_sup_dist for fk in flow]
    doc["warnings"] = sorted({str(w.message) for w in caught})
    doc["config_hash"] = cfg.content_hash()
    ctx.write_json("weak_distance_report.json", doc)
    ctx.write_table("weak_distances", report.CSV_COLUMNS, report.rows(), partial=report.partial)
    if report.partial:
        _diagnose("budget", {"partial": True, "seeds_completed": len(report.seeds)})
        return EXIT_BUDGET
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "rgflow": cmd_rgflow,
    "rwre": cmd_rwre,
    "correlations": cmd_correlations,
    "verify": cmd_verify,
}


# ----------------------------------------------------------------------------
# argument handling

def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v <= MASK64:
        raise argparse.ArgumentTypeError(f"{text} is not an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config (defaults if omitted)")
    common.add_argument("--seed", type=_u64, help="64-bit master seed (overrides the config)")
    common.add_argument("--threads", type=_positive, help="worker cap (env CMLDIFF_THREADS, default 1)")
    common.add_argument("--out", type=Path, help="output directory (env CMLDIFF_OUT)")
    common.add_argument("--budget-seconds", type=float, help="wall-clock budget; partial outputs are flagged")
    p = argparse.ArgumentParser(prog="cmldiff", description="Coupled map lattice diffusion experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=fn.__name__.removeprefix("cmd_"))
    return p


def make_context(args, env=None) -> RunContext:
    env = os.environ if env is None else env
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    threads = args.threads
    if threads is None:
        raw = env.get("CMLDIFF_THREADS")
        try:
            threads = int(raw) if raw else 1
        except ValueError:
            raise ConfigError([f"CMLDIFF_THREADS: not an integer: {raw!r}"]) from None
        if threads < 1:
            raise ConfigError(["CMLDIFF_THREADS: must be positive"])
    out = args.out or (Path(env["CMLDIFF_OUT"]) if env.get("CMLDIFF_OUT") else Path(cfg.output.dir))
    deadline = None
    if args.budget_seconds is not None:
        if args.budget_seconds <= 0:
            raise BudgetError("budget must be positive")
        deadline = time.monotonic() + args.budget_seconds
    return RunContext(cfg, seed, threads, out, deadline, args.command)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        ctx = make_context(args)
        return COMMANDS[args.command](ctx)
    except ConfigError as err:
        _diagnose("config", err.problems)
        return EXIT_CONFIG
    except (BoxSizeError, ValueError) as err:
        _diagnose("config", [str(err)])
        return EXIT_CONFIG
    except BudgetError as err:
        _diagnose("budget", [str(err)])
        return EXIT_BUDGET
