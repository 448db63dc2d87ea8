"""Command-line harness: run, sweep, calibrate-graph, check, trajectory."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, dump_json, load_config
from .experiments import build_mixing, build_run, execute, run_manifest_entry
from .graph import (
    CalibrationFailed,
    DegenerateMixing,
    DisconnectedGraph,
    NotDoublyStochastic,
    calibrate_radius,
    check_doubly_stochastic,
    graph_document,
    graph_hash,
)
from .metrics import MetricsTrace
from .optimizer import SMPL, AlgorithmConfig, BadInit, run_algorithm
from .problems import InvalidProblem, make_quartic_problem
from .problems.quartic import distance_to_feasible

log = logging.getLogger("dsmpl")


# ---------------------------------------------------------------- output helpers


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_trace(trace: MetricsTrace, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    trace.to_csv(tmp)
    os.replace(tmp, path)


def rows_to_csv(rows: list[dict], columns: list[str] | None = None) -> str:
    if columns is None:
        columns = []
        for r in rows:
            for k in r:
                if k not in columns:
                    columns.append(k)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _cell(r.get(k)) for k in columns})
    return buf.getvalue()


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def trace_names(seeds: list[int]) -> list[str]:
    """``trace_<seed>.csv``; repeated seeds get a ``_<k>`` suffix from the second occurrence on."""
    seen: dict[int, int] = {}
    names = []
    for s in seeds:
        seen[s] = seen.get(s, 0) + 1
        names.append(f"trace_{s}.csv" if seen[s] == 1 else f"trace_{s}_{seen[s]}.csv")
    return names


def _aggregate(summaries: list[dict]) -> dict:
    out = {}
    keys = [k for k in summaries[0] if k not in ("seed", "variant")] if summaries else []
    for k in keys:
        vals = [s.get(k) for s in summaries]
        nums = [float(v) for v in vals if isinstance(v, (int, float)) and v is not None and math.isfinite(float(v))]
        if nums:
            out[k] = {"median": float(np.median(nums)), "mean": float(np.mean(nums)), "count": len(nums)}
    return out


# ---------------------------------------------------------------- commands


def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.preset, args.override)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seeds"] = [args.seed]
    if getattr(args, "threads", None):
        changes["threads"] = args.threads
    if getattr(args, "out", None):
        changes["output_dir"] = args.out
    return replace(cfg, **changes) if changes else cfg


def _run_seeds(cfg: ExperimentConfig, out: Path, command: str) -> dict:
    entries, summaries = [], []
    for seed, name in zip(cfg.seeds, trace_names(cfg.seeds)):
        built = build_run(cfg, seed)
        log.info("seed %d: %s on %s, d=%d, n=%d, lambda=%.4f", seed, built.algo.variant, built.problem.name,
                 built.problem.d, built.problem.n, built.mixing.lam)
        outcome = execute(built, cfg.epsilon)
        write_trace(outcome.result.trace, out / name)
        entries.append(run_manifest_entry(outcome, name))
        summaries.append(outcome.summary)
        if built.params is not None:
            _write_waypoints(out, seed, built, outcome)
    atomic_write_text(out / "summary.csv", rows_to_csv(summaries))
    manifest = {
        "command": command,
        "code_version": __version__,
        "resolved_config": cfg.to_dict(),
        "runs": entries,
        "summary": _aggregate(summaries),
    }
    atomic_write_text(out / "manifest.json", dump_json(manifest))
    return manifest


def cmd_run(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg.output_dir)
    manifest = _run_seeds(cfg, out, "run")
    for r in manifest["runs"]:
        s = r["summary"]
        print(f"seed {s['seed']}: Pi_final={s['Pi_final']:.3e} F_bar_final={s['F_bar_final']:.6g} -> {out / r['trace']}")
    return 0


def _write_waypoints(out: Path, seed: int, built, outcome) -> None:
    params = built.params
    path = out / "waypoints.csv"
    X = params.waypoints(outcome.result.x_final.mean(axis=0))
    rows = []
    for j in range(params.N):
        for tau in range(params.T_wp + 1):
            rows.append({"seed": seed, "usv": j, "tau": tau, "x": float(X[j, tau, 0]), "y": float(X[j, tau, 1])})
    text = rows_to_csv(rows, ["seed", "usv", "tau", "x", "y"])
    if path.exists() and path.stat().st_size:
        previous = [r for r in csv.DictReader(path.read_text().splitlines()) if r["seed"] != str(seed)]
        text = rows_to_csv(previous, ["seed", "usv", "tau", "x", "y"]) + text.split("\n", 1)[1]
    atomic_write_text(path, text)


def cmd_trajectory(args) -> int:
    if args.preset is None and args.config is None:
        args.preset = "trajectory"
    overrides = list(args.override or [])
    if args.scale:
        overrides.append(f"problem.scale={args.scale}")
    args.override = overrides
    cfg = _resolve(args)
    if cfg.problem.get("kind") != "trajectory":
        raise ConfigError("the trajectory command needs problem.kind: trajectory")
    out = Path(cfg.output_dir)
    wp = out / "waypoints.csv"
    if wp.exists():
        wp.unlink()
    manifest = _run_seeds(cfg, out, "trajectory")
    for r in manifest["runs"]:
        s = r["summary"]
        print(f"seed {s['seed']}: d={r['dimension']} objective {s['F_initial']:.4g} -> {s['F_final']:.4g} "
              f"(reduction {100 * s['reduction']:.1f}%), violation {s['violation_final']:.2e}, "
              f"equality residual {s['equality_max']:.1e}")
    return 0


def _sweep_cell(cfg: ExperimentConfig, axis: str, value, seed: int):
    if axis == "gamma":
        built = build_run(cfg, seed, gamma=float(value))
    elif axis == "n":
        built = build_run(cfg, seed, n=int(value))
    elif axis == "lambda":
        built = build_run(cfg, seed, target_lambda=float(value))
    else:
        built = build_run(cfg, seed)
    return execute(built, cfg.epsilon)


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    sweep = dict(cfg.sweep)
    if args.axis:
        sweep["axis"] = args.axis
    if args.values:
        sweep["values"] = [float(v) if args.axis != "n" else int(v) for v in args.values.split(",") if v.strip()]
    axis, values = sweep.get("axis"), sweep.get("values")
    if axis not in ("gamma", "n", "lambda", "epsilon"):
        raise ConfigError(f"sweep axis must be one of gamma, n, lambda, epsilon (got {axis!r})")
    if not values:
        raise ConfigError("sweep axis has an empty value list")
    if axis == "epsilon":
        cfg = replace(cfg, epsilon=[float(v) for v in values])
        cells = [(None, s) for s in cfg.seeds]
    else:
        cells = [(v, s) for v in values for s in cfg.seeds]
    out = Path(cfg.output_dir)

    def work(cell):
        value, seed = cell
        try:
            return cell, _sweep_cell(replace(cfg, threads=1), axis, value, seed), None
        except Exception as exc:  # partial-failure policy: record and continue
            log.error("cell %s=%s seed %d failed: %s", axis, value, seed, exc)
            return cell, None, f"{type(exc).__name__}: {exc}"

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(work, cells))
    else:
        results = [work(c) for c in cells]

    rows, entries, curves = [], [], {}
    for (value, seed), outcome, error in results:
        label = "all" if value is None else f"{value:g}"
        cell_dir = f"{axis}={label}"
        name = f"{cell_dir}/trace_{seed}.csv"
        row = {"axis": axis, "value": value, "seed": seed, "status": "ok" if error is None else "failed",
               "error": error}
        if outcome is not None:
            write_trace(outcome.result.trace, out / name)
            row.update(outcome.summary)
            entries.append({"value": value, **run_manifest_entry(outcome, name)})
            curves.setdefault(label, []).append(outcome.result.trace.column("Pi"))
        rows.append(row)

    atomic_write_text(out / "summary.csv", rows_to_csv(rows))
    T_rows = []
    labels = ["all"] if axis == "epsilon" else [f"{v:g}" for v in values]
    for label in labels:
        ok = [r for r in rows if r["status"] == "ok" and (axis == "epsilon" or f"{r['value']:g}" == label)]
        for eps in cfg.epsilon:
            hits = [r[f"T_eps_{eps:g}"] for r in ok if r.get(f"T_eps_{eps:g}") is not None]
            T_rows.append({
                axis if axis != "epsilon" else "group": label,
                "epsilon": eps,
                "T_eps_median": float(np.median(hits)) if hits else None,
                "reached": len(hits),
                "runs": len(ok),
            })
    atomic_write_text(out / "T_eps.csv", rows_to_csv(T_rows))
    if curves:
        length = max(len(c) for cs in curves.values() for c in cs)
        mean_rows = []
        for t in range(length):
            row = {"t": t + 1}
            for label, cs in curves.items():
                vals = [c[t] for c in cs if t < len(c)]
                row[f"{axis}={label}"] = float(np.mean(vals)) if vals else None
            mean_rows.append(row)
        atomic_write_text(out / "mean_pi.csv", rows_to_csv(mean_rows))
    manifest = {
        "command": "sweep",
        "code_version": __version__,
        "resolved_config": {**cfg.to_dict(), "sweep": sweep},
        "cells": entries,
        "failed": [r for r in rows if r["status"] != "ok"],
    }
    atomic_write_text(out / "manifest.json", dump_json(manifest))
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"sweep over {axis}: {len(rows) - failed}/{len(rows)} cells ok -> {out}")
    return 0


def cmd_calibrate_graph(args) -> int:
    graph, mixing, _ = calibrate_radius(args.n, args.target_lambda, args.tol, args.seed)
    doc = graph_document(graph, mixing)
    doc["hash"] = graph_hash(graph, mixing)
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.out:
        path = Path(args.out)
        if path.suffix != ".json":
            path = path / "graph.json"
        atomic_write_text(path, text + "\n")
        print(f"lambda={mixing.lam:.6f} nu={mixing.nu:.6f} -> {path}")
    else:
        print(text)
    return 0


def _check_report(cfg: ExperimentConfig) -> list[dict]:
    """Invariant suite on short runs derived from the config."""
    results = []

    def record(name, ok, measured, note=""):
        results.append({"check": name, "status": "PASS" if ok else "FAIL", "measured": measured, "note": note})

    seed = cfg.seeds[0]
    T = min(int(cfg.algorithm["T"]), 300)
    short = replace(cfg, algorithm={**cfg.algorithm, "T": T}, threads=1)
    try:
        _, mixing = build_mixing(short, seed)
        check_doubly_stochastic(mixing.W)
        record("doubly stochastic W", True, float(np.max(np.abs(mixing.W.sum(axis=1) - 1.0))))
    except (NotDoublyStochastic, DegenerateMixing, DisconnectedGraph, CalibrationFailed) as exc:
        W = np.asarray(cfg.graph.get("W", []), dtype=float)
        dev = float(np.max(np.abs(W.sum(axis=1) - 1.0))) if W.size else math.nan
        record("doubly stochastic W", False, dev, str(exc))
        return results

    built = build_run(short, seed)
    gaps = {"track": 0.0, "avg": 0.0}

    def hook(s):
        gaps["track"] = max(gaps["track"], float(np.linalg.norm(s.y_next.mean(0) - s.z_next.mean(0))))
        if built.algo.variant == SMPL:
            gaps["avg"] = max(gaps["avg"], float(np.linalg.norm(s.x_next.mean(0) - s.x_check.mean(0))))

    outcome = execute(built, cfg.epsilon, hooks=[hook])
    d = built.problem.d
    record("tracking conservation", gaps["track"] <= 1e-9 * math.sqrt(d), gaps["track"], f"T={T}")
    if built.algo.variant == SMPL:
        record("SMPL average identity", gaps["avg"] <= 1e-12 * math.sqrt(d), gaps["avg"])

    # consensus accumulation on an SMPL run sharing the config's network
    eta = built.algo.eta or (1.0 / built.algo.mu)
    smpl = AlgorithmConfig(variant="SMPL", eta=eta, beta=built.algo.beta, gamma=built.algo.gamma, T=T, seed=seed,
                           compute_pi=False, record_time=False)
    res = run_algorithm(built.problem, built.mixing, smpl, built.x0)
    from .metrics import check_cumulative_bounds

    diag = check_cumulative_bounds(res.trace, built.mixing.nu, built.mixing.lam)
    record("consensus accumulation bound", diag.holds(), diag.consensus_bound_slack, "realized LHS/RHS")

    if built.problem.name == "quartic":
        from .graph import MixingMatrix

        single = make_quartic_problem(1, noise_std=0.0, seed=seed, gamma=built.algo.gamma or 1.0)
        eta1 = 1.0 / (8.0 * single.L * (1.0 + single.gamma))
        cfg1 = AlgorithmConfig(variant="SMPL", eta=eta1, beta=1.0, gamma=single.gamma, T=200, seed=seed,
                               compute_pi=False, record_time=False)
        r1 = run_algorithm(single, MixingMatrix(np.ones((1, 1)), 0.0, 1.0), cfg1, built.x0)
        F = r1.trace.column("F_bar")
        worst = float(np.max(np.diff(F))) if F.size > 1 else 0.0
        record("noiseless single-agent descent", worst <= 1e-9, worst, "max F increase")

        quiet = make_quartic_problem(built.problem.n, noise_std=0.0, seed=seed, gamma=built.algo.gamma)
        errs = [0.0]

        def zhook(s):
            G = np.array([quiet.mean_grad(i, s.x_next[i]) for i in range(quiet.n)])
            errs[0] = max(errs[0], float(np.max(np.abs(s.z_next - G))))

        qcfg = replace(built.algo, T=T, compute_pi=False, record_time=False, b0=1)
        rq = run_algorithm(quiet, built.mixing, qcfg, built.x0, hooks=[zhook])
        phi = float(np.nanmax(np.abs(rq.trace.column("phi"))))
        ups = float(np.nanmax(np.abs(rq.trace.column("upsilon"))))
        record("noiseless momentum exactness", errs[0] <= 1e-10 and phi == 0.0 and ups == 0.0,
               errs[0], f"max phi={phi:.1e}, upsilon={ups:.1e}")
        xbar = float(outcome.result.x_final.mean())
        dist = distance_to_feasible(xbar)
        record("penalty feasibility of final iterate", dist <= 1e-2, dist,
               f"x_final={xbar:.6f}, gamma={built.algo.gamma:g}, T={T}")
    else:
        viol = outcome.summary["violation_final"]
        record("final violation", viol <= 1e-3 * built.problem.m, viol)
        record("equality preservation", outcome.eq_max <= 1e-7, outcome.eq_max)
    return results


def cmd_check(args) -> int:
    if args.preset is None and args.config is None:
        args.preset = "synthetic"
    cfg = _resolve(args)
    results = _check_report(cfg)
    for r in results:
        print(f"{r['status']} {r['check']}: {r['measured']:.3e} {r['note']}".rstrip())
    if args.out:
        atomic_write_text(Path(args.out) / "check.json", json.dumps(results, indent=2) + "\n")
    failed = sum(r["status"] == "FAIL" for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


# ---------------------------------------------------------------- entry point


def _common(p: argparse.ArgumentParser, seed=True):
    p.add_argument("--config", help="YAML config file or a run manifest.json")
    p.add_argument("--preset", help="named preset (synthetic, synthetic-gamma-sweep, ..., trajectory)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. algorithm.beta=0.5 (repeatable)")
    if seed:
        p.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help="worker threads (agents within a run, cells within a sweep)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsmpl", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run every configured seed")
    _common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="cross product over one axis and the seeds")
    _common(p)
    p.add_argument("--axis", choices=["gamma", "n", "lambda", "epsilon"])
    p.add_argument("--values", help="comma-separated axis values (overrides sweep.values)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("calibrate-graph", help="random geometric graph with a target spectral parameter")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--target-lambda", type=float, required=True)
    p.add_argument("--tol", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_calibrate_graph)

    p = sub.add_parser("check", help="invariant suite with measured slacks")
    _common(p)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("trajectory", help="formation trajectory planning run")
    _common(p)
    p.add_argument("--scale", choices=["desk", "paper"])
    p.set_defaults(func=cmd_trajectory)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, BadInit, InvalidProblem, CalibrationFailed, DisconnectedGraph, NotDoublyStochastic,
            DegenerateMixing, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
