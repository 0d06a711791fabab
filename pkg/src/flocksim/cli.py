"""Command-line experiment runner.

    flocksim <task> --config <path> [--set key=value]... [--out dir] [--jobs n]
    flocksim compare <run_a> <run_b> --metric {w1,w1_shifted,tv} [--envelope] [--out file]

Exit codes: 0 success (non-convergence is flagged in the manifest), 2 invalid
configuration or incompatible inputs, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import platform
import sys
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from . import __version__
from .bounds import BoundEnvelope, calibrate_constant, moment_envelope, tv_envelope_bounded
from .config import TASKS, ConfigError, ExperimentConfig, dump_config, load_config
from .export import (jsonl_lines, sha256_file, write_json, write_jsonl, write_jump_log_csv,
                     write_rows_csv, write_trajectory_csv)
from .inequalities import certify_calibrated, certify_constant_free
from .meanfield import MarginalFlow, chaos_study, direct_mckean, picard_iterate
from .metrics import EmpiricalMeasure, tv_histogram, w1_exact
from .ode import flocking_diagnostics, integrate
from .particles import (NonFiniteStateError, SimConfig, bracket_moment, derive_seed, ensemble,
                        exp_bracket_moment, mean_velocity, simulate_replicas)

log = logging.getLogger("flocksim")

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class InputError(ValueError):
    """Inputs that parse but cannot be combined (e.g. incompatible run grids)."""


# -- helpers ------------------------------------------------------------------

def _versions() -> dict:
    out = {"python": platform.python_version(), "flocksim": __version__}
    for pkg in ("numpy", "scipy", "pot", "pydantic", "tomli", "tomli-w"):
        try:
            out[pkg] = version(pkg)
        except PackageNotFoundError:
            out[pkg] = None
    return out


def _flow_from_states(states) -> MarginalFlow:
    times = [s.t for s in states]
    if times[0] != 0.0:
        raise InputError("a marginal flow needs a snapshot at t = 0")
    return MarginalFlow(times, [EmpiricalMeasure.from_state(s) for s in states])


def _with_zero(cfg: SimConfig) -> SimConfig:
    times = tuple(sorted({0.0, *cfg.output_times}))
    return SimConfig(cfg.t_end, times, cfg.seed, cfg.truncation_m, cfg.record_jump_log,
                     cfg.exclude_diagonal, cfg.majorant)


# -- tasks: each writes into ``out`` and returns (flags, warnings) -----------------

def task_simulate_particles(cfg: ExperimentConfig, out: Path, jobs: int):
    ks, mu0, sim = cfg.kernel_set(), cfg.mu0(), _with_zero(cfg.sim_config())
    trajs = simulate_replicas(ks, mu0, cfg.run.replicas, sim, jobs)
    write_trajectory_csv(out / "trajectory.csv", trajs[0].states)
    _flow_from_states(trajs[0].states).to_csv(out / "flow.csv")
    if sim.record_jump_log:
        write_jump_log_csv(out / "jump_log.csv", trajs[0].jump_log, ks.d)
    if len(trajs) > 1:
        rows = []
        for ti, t in enumerate(sim.output_times):
            m2 = np.array([np.mean(np.sum(tr.states[ti].velocities ** 2, axis=1)) for tr in trajs])
            rows.append((t, float(m2.mean()), float(m2.std(ddof=1) / np.sqrt(len(m2)))))
        write_rows_csv(out / "ensemble_m2.csv", ["t", "mean", "sem"], rows)
    flags = {"truncation_frozen_runs": sum(tr.truncation_frozen for tr in trajs),
             "proposals": sum(tr.proposals for tr in trajs),
             "accepted": sum(tr.accepted for tr in trajs)}
    return flags, []


def task_simulate_ode(cfg: ExperimentConfig, out: Path, jobs: int):
    mu0 = cfg.mu0()
    state0 = mu0(np.random.default_rng(cfg.run.seed or 0))
    traj = integrate(cfg.model.psi.build(), state0, cfg.run.t_end, cfg.run.dt, cfg.run.save_every)
    write_trajectory_csv(out / "trajectory.csv", [traj.state(i) for i in range(len(traj.times))])
    vs, ps = flocking_diagnostics(traj)
    write_rows_csv(out / "flocking.csv", ["t", "velocity_spread", "position_spread"],
                   zip(map(float, traj.times), map(float, vs), map(float, ps)))
    return {"steps": len(traj.times) - 1}, []


def task_meanfield_direct(cfg: ExperimentConfig, out: Path, jobs: int):
    flow, traj = direct_mckean(cfg.kernel_set(), cfg.mu0(), cfg.meanfield.M, cfg.sim_config())
    flow.to_csv(out / "flow.csv")
    return {"M": cfg.meanfield.M, "truncation_frozen": traj.truncation_frozen}, []


def task_meanfield_picard(cfg: ExperimentConfig, out: Path, jobs: int):
    mf = cfg.meanfield
    sim = cfg.sim_config()
    flow, report = picard_iterate(cfg.kernel_set(), cfg.mu0(), mf.M, sim, mf.max_iter, mf.tol,
                                  grid_dt=mf.grid_dt, jobs=jobs)
    flow.restrict(sim.output_times).to_csv(out / "flow.csv")
    write_jsonl(out / "picard.jsonl", ({"iteration": i + 1, "discrepancy": d}
                                       for i, d in enumerate(report.discrepancies)))
    warnings = [] if report.converged else [
        f"picard iteration did not reach tol={mf.tol} in {mf.max_iter} iterations"]
    return {"converged": report.converged, "iterations": report.iterations}, warnings


def task_chaos_study(cfg: ExperimentConfig, out: Path, jobs: int):
    mf = cfg.meanfield
    sim = cfg.sim_config()
    times = [t for t in sim.output_times if t > 0] or [sim.t_end]
    sim = SimConfig(sim.t_end, tuple(times), sim.seed, sim.truncation_m, False,
                    sim.exclude_diagonal, sim.majorant)
    table = chaos_study(cfg.kernel_set(), cfg.mu0(), mf.N_list, mf.M_ref, sim,
                        replicas=mf.tagged_replicas, bootstrap=mf.bootstrap, jobs=jobs)
    write_rows_csv(out / "chaos.csv", ["N", "t", "w1", "se"],
                   ((r.N, r.t, r.w1, r.se) for r in table.rows))
    write_rows_csv(out / "noise_floor.csv", ["t", "w1"], sorted(table.noise_floor.items()))
    return {"M_ref": mf.M_ref, "replicas": mf.tagged_replicas}, []


def task_metrics(cfg: ExperimentConfig, out: Path, jobs: int):
    ms = cfg.metrics
    observables = {f"moment_{q:g}": bracket_moment(q) for q in ms.moments}
    if ms.exp_delta is not None:
        observables["exp_moment"] = exp_bracket_moment(ms.exp_delta, ms.exp_kappa)
    observables["mean_velocity"] = mean_velocity
    sim = cfg.sim_config()
    summary = ensemble(cfg.kernel_set(), cfg.mu0(), cfg.run.replicas, sim, observables, jobs)
    records = []
    for name in observables:
        for ti, t in enumerate(summary.times):
            meta = {"estimator": "ensemble mean of per-replica empirical averages",
                    "replicas": summary.n_runs, "sem": summary.sem(name)[ti]}
            if name == "exp_moment":
                meta.update(delta=ms.exp_delta, kappa=ms.exp_kappa)
            records.append({"metric": name, "t": float(t), "value": summary.mean[name][ti],
                            "estimator_metadata": meta})
    write_jsonl(out / "metrics.jsonl", records)
    return {"frozen_runs": summary.frozen_runs}, []


def task_verify_bounds(cfg: ExperimentConfig, out: Path, jobs: int):
    ks, bs = cfg.kernel_set(), cfg.bounds
    sim = _with_zero(cfg.sim_config())
    p, gamma = bs.p, ks.gamma
    name = f"moment_{2 * p:g}"
    summary = ensemble(ks, cfg.mu0(), cfg.run.replicas, sim, {name: bracket_moment(2 * p)}, jobs)
    times, observed = summary.times, summary.mean[name]
    lam = ks.noise.moment(p)
    scale = ks.psi.psi_max * ks.sigma.growth_constant
    init = float(observed[0])

    def envelope(c, t):
        # fit the growth term only; the 2^(...) prefactors would otherwise absorb it into C = 0
        return moment_envelope(p, gamma, lam, c * scale, init, t, kind="particle", prefactors=False)

    c_hat = bs.C if bs.C is not None else calibrate_constant(envelope, times, observed, safety=bs.safety)
    env = BoundEnvelope("moment", {"p": p, "gamma": gamma, "lam_2p": lam, "C": c_hat * scale,
                                   "init_2p": init, "kind": "particle"})
    env.to_csv(out / "envelope.csv", times)
    bound = np.atleast_1d(env(times))
    violated = observed > bound
    write_jsonl(out / "bounds.jsonl", ({"metric": name, "t": float(t), "observed": o, "sem": s,
                                        "bound": b, "violated": bool(v)}
                                       for t, o, s, b, v in zip(times, observed, summary.sem(name),
                                                                bound, violated)))
    warnings = [f"envelope violated at {int(violated.sum())} time(s)"] if violated.any() else []
    return {"C": c_hat, "calibrated": bs.C is None, "violations": int(violated.sum())}, warnings


def task_certify(cfg: ExperimentConfig, out: Path, jobs: int):
    cs = cfg.certify
    rng = np.random.default_rng(cfg.run.seed)
    reports = list(certify_constant_free(rng, cs.samples, p=max(cs.p_list)))
    for p in cs.p_list:
        for gamma in cs.gamma_list:
            reports.extend(certify_calibrated(rng, cs.samples, p=p, gamma=gamma, safety=cs.safety))
    write_jsonl(out / "certify.jsonl", (r.as_record() for r in reports))
    total = sum(r.violations for r in reports)
    return {"violations": total}, ([f"{total} inequality violations"] if total else [])


TASK_FUNCS = {
    "simulate-particles": task_simulate_particles,
    "simulate-ode": task_simulate_ode,
    "meanfield-direct": task_meanfield_direct,
    "meanfield-picard": task_meanfield_picard,
    "chaos-study": task_chaos_study,
    "metrics": task_metrics,
    "verify-bounds": task_verify_bounds,
    "certify-inequalities": task_certify,
}


# -- run / compare --------------------------------------------------------------

def write_manifest(out: Path, cfg: ExperimentConfig, flags: dict, warnings: list) -> dict:
    files = {p.name: sha256_file(p) for p in sorted(out.iterdir())
             if p.is_file() and p.name != "manifest.json"}
    digest = hashlib.sha256()
    for name, h in files.items():
        if name != "config.toml":
            digest.update(f"{name}:{h}\n".encode())
    ks = cfg.kernel_set()
    seed = cfg.run.seed
    manifest = {
        "task": cfg.task,
        "versions": _versions(),
        "seed": seed,
        "seed_derivation": "replica i uses splitmix64 output i+1 from master seed",
        "replica_seeds": ([derive_seed(seed, i) for i in range(min(cfg.run.replicas, 64))]
                          if seed is not None else []),
        "model_flags": ks.flags(),
        "flags": flags,
        "warnings": warnings,
        "files": files,
        "outputs_sha256": digest.hexdigest(),
    }
    write_json(out / "manifest.json", manifest)
    return manifest


def run(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> dict:
    """Execute ``cfg.task`` into directory ``out`` and return the manifest."""
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.toml")
    try:
        cfg.kernel_set()
        cfg.mu0()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    flags, warnings = TASK_FUNCS[cfg.task](cfg, out, jobs)
    for w in warnings:
        log.warning(w)
    return write_manifest(out, cfg, flags, warnings)


def _load_flow(run_dir: Path) -> MarginalFlow:
    path = run_dir / "flow.csv"
    if not path.exists():
        raise InputError(f"{run_dir} has no flow.csv")
    return MarginalFlow.from_csv(path)


def compare(run_a: Path, run_b: Path, metric: str, envelope: bool = False) -> list:
    """Distances between the stored marginal flows of two runs, per common time."""
    fa, fb = _load_flow(run_a), _load_flow(run_b)
    common = [t for t in fa.times if np.any(np.isclose(fb.times, t, rtol=0, atol=1e-12))]
    if not common:
        raise InputError("runs share no output times")
    if fa.measures[0].d != fb.measures[0].d:
        raise InputError("runs live in different dimensions")
    env_fn = None
    if envelope:
        if metric != "tv":
            raise InputError("envelope overlay is available for metric 'tv' only")
        cfg = load_config(run_a / "config.toml")
        ks = cfg.kernel_set()
        if not ks.sigma.is_constant:
            raise InputError("the TV envelope needs bounded sigma (gamma = 0)")
        t0 = common[0]
        tv0 = tv_histogram(fa.at(t0), fb.at(t0))
        env_fn = lambda t: float(tv_envelope_bounded(tv0, ks.psi.psi_max, ks.sigma.sup, t - t0, cap=2.0))  # noqa: E731
    records = []
    for t in common:
        a, b = fa.at(t), fb.at(t)
        if metric == "w1":
            value, meta = w1_exact(a, b), {"estimator": "exact W1", "ground_metric": "|dr| + |dv|"}
        elif metric == "w1_shifted":
            value, meta = w1_exact(a, b, t), {"estimator": "exact W1", "ground_metric": "d_t"}
        elif metric == "tv":
            est = tv_histogram(a, b, detail=True)
            value, meta = est.value, est.metadata
        else:
            raise InputError(f"unknown metric {metric!r}")
        meta = dict(meta, samples=[a.n, b.n])
        rec = {"metric": metric, "t": float(t), "value": value, "estimator_metadata": meta}
        if env_fn is not None:
            rec["envelope"] = env_fn(t)
        records.append(rec)
    return records


def _default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("FLOCKSIM_JOBS", "1")))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flocksim", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="task", required=True)
    for task in TASKS:
        sp = sub.add_parser(task)
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        sp.add_argument("--out", type=Path, default=None)
        sp.add_argument("--jobs", type=int, default=None)
    cp = sub.add_parser("compare")
    cp.add_argument("run_a", type=Path)
    cp.add_argument("run_b", type=Path)
    cp.add_argument("--metric", choices=("w1", "w1_shifted", "tv"), default="w1")
    cp.add_argument("--envelope", action="store_true")
    cp.add_argument("--out", type=Path, default=None, help="JSONL file (default: stdout)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.task == "compare":
            records = compare(args.run_a, args.run_b, args.metric, args.envelope)
            if args.out is None:
                sys.stdout.writelines(jsonl_lines(records))
            else:
                write_jsonl(args.out, records)
            return 0
        cfg = load_config(args.config, args.overrides, default_task=args.task)
        if cfg.task != args.task:
            raise ConfigError(f"config declares task {cfg.task!r} but {args.task!r} was requested")
        out = args.out
        if out is None:
            out = Path("runs") / f"{cfg.task}-{hashlib.sha256(cfg.model_dump_json().encode()).hexdigest()[:12]}"
        jobs = args.jobs if args.jobs is not None else _default_jobs()
        run(cfg, out, max(1, jobs))
        print(out)
        return 0
    except (ConfigError, InputError) as exc:
        print(f"flocksim: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteStateError, ArithmeticError, AssertionError) as exc:
        print(f"flocksim: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
