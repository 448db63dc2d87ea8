"""Builders that turn an :class:`ExperimentConfig` into runs and summaries."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .graph import (
    Graph,
    MixingMatrix,
    calibrate_radius,
    check_doubly_stochastic,
    complete_graph,
    generate_random_geometric,
    graph_hash,
    metropolis_weights,
    path_graph,
    spectral_gap,
    star_graph,
)
from .metrics import check_cumulative_bounds, extract_T_epsilon
from .optimizer import AlgorithmConfig, RunResult, Schedule, default_schedule, run_algorithm
from .problems import (
    ProblemSpec,
    VortexField,
    desk_scale_params,
    distance_to_feasible,
    make_quartic_problem,
    make_trajectory_problem,
    paper_scale_params,
)


@dataclass
class BuiltRun:
    seed: int
    problem: ProblemSpec
    mixing: MixingMatrix
    graph: Graph | None
    algo: AlgorithmConfig
    schedule: Schedule | None
    x0: np.ndarray
    params: object = None


@dataclass
class RunOutcome:
    built: BuiltRun
    result: RunResult
    summary: dict
    theory: dict
    eq_max: float = 0.0
    extra: dict = field(default_factory=dict)


def build_mixing(cfg: ExperimentConfig, seed: int, n: int | None = None) -> tuple[Graph | None, MixingMatrix]:
    g = cfg.graph
    n = int(n if n is not None else g["n"])
    topo = g.get("topology", "geometric")
    gseed = int(g.get("seed", seed))
    if "W" in g:
        W = np.asarray(g["W"], dtype=float)
        check_doubly_stochastic(W)
        lam, nu = spectral_gap(W)
        return None, MixingMatrix(W, lam, nu)
    if topo == "path":
        graph = path_graph(n)
    elif topo == "complete":
        graph = complete_graph(n)
    elif topo == "star":
        graph = star_graph(n)
    elif g.get("target_lambda") is not None:
        graph, mixing, _ = calibrate_radius(n, float(g["target_lambda"]), float(g.get("tol", 0.02)), gseed)
        return graph, mixing
    else:
        graph = generate_random_geometric(n, float(g["radius"]), gseed)
    return graph, metropolis_weights(graph)


def _trajectory_params(p: dict):
    base = paper_scale_params if p.get("scale", "desk") == "paper" else desk_scale_params
    over = {}
    for key in ("N", "T_wp", "T_f", "v_max", "noise_sigma", "center_jitter", "field_seed", "mc_budget"):
        if key in p:
            over[key] = p[key]
    for key in ("starts", "goals", "formation"):
        if key in p:
            over[key] = np.asarray(p[key], dtype=float)
    if "vortices" in p:
        v = p["vortices"]
        over["base_field"] = VortexField(np.asarray(v["centers"], float).reshape(-1, 2),
                                         np.asarray(v["strengths"], float), np.asarray(v["radii"], float))
    if "N" in p and "formation" not in p:
        from .problems import box_formation

        over["formation"] = box_formation(int(p["N"]))
    return base(**over)


def build_problem(cfg: ExperimentConfig, seed: int, n: int, gamma: float):
    p = cfg.problem
    if p["kind"] == "quartic":
        problem = make_quartic_problem(n, noise_std=float(p.get("noise_std", 1.0)), seed=int(p.get("seed", seed)),
                                       gamma=gamma)
        x0 = np.asarray(cfg.x0 if cfg.x0 is not None else [0.0], dtype=float)
        return problem, x0, None
    params = _trajectory_params(p)
    problem = make_trajectory_problem(params, n, gamma=gamma, mc_seed=int(p.get("mc_seed", 0)))
    x0 = params.straight_line() if cfg.x0 is None else np.asarray(cfg.x0, dtype=float)
    return problem, x0, params


def build_run(cfg: ExperimentConfig, seed: int, n: int | None = None, gamma: float | None = None,
              target_lambda: float | None = None) -> BuiltRun:
    a = cfg.algorithm
    gamma = float(a["gamma"] if gamma is None else gamma)
    n = int(cfg.graph["n"] if n is None else n)
    if target_lambda is not None:
        cfg = _with_graph(cfg, target_lambda=target_lambda)
    graph, mixing = build_mixing(cfg, seed, n)
    problem, x0, params = build_problem(cfg, seed, n, gamma)
    variant = a.get("variant", "SCAMPL")
    T = int(a["T"])
    schedule = None
    kwargs = dict(variant=variant, gamma=gamma, T=T, seed=seed, threads=cfg.threads, record_time=cfg.timing)
    if a.get("schedule", "explicit") == "theory":
        mu = a.get("mu")
        schedule = default_schedule(variant, n, mixing.nu, problem.L, problem.sigma_bar_sq, T, gamma,
                                    mu=mu, lam=mixing.lam, strict=bool(a.get("strict", False)))
        kwargs.update(eta=schedule.eta, alpha=schedule.alpha, mu=mu, beta=schedule.beta, b0=schedule.b0)
    else:
        kwargs.update(eta=a.get("eta"), alpha=a.get("alpha"), mu=a.get("mu"), beta=float(a["beta"]),
                      b0=int(a.get("b0", 1)))
    if variant == "SMPL":
        kwargs.update(alpha=None, mu=None)
    else:
        kwargs.update(eta=None)
    return BuiltRun(seed, problem, mixing, graph, AlgorithmConfig(**kwargs), schedule, x0, params)


def _with_graph(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    from dataclasses import replace

    return replace(cfg, graph={**cfg.graph, **changes})


def execute(built: BuiltRun, epsilon: list, hooks=None) -> RunOutcome:
    problem = built.problem
    eq = [0.0]

    def eq_hook(snap):
        if problem.has_equalities:
            eq[0] = max(eq[0], max(problem.equality_residual(x) for x in snap.x_next))

    tic = time.perf_counter()
    result = run_algorithm(problem, built.mixing, built.algo, built.x0, hooks=[eq_hook] + list(hooks or []))
    wall = time.perf_counter() - tic
    trace = result.trace
    xbar = result.x_final.mean(axis=0)
    theory = check_cumulative_bounds(trace, built.mixing.nu, built.mixing.lam, built.algo.variant,
                                     built.algo.alpha or 1.0, L_estimate=problem.L,
                                     sigma_bar_sq_estimate=problem.sigma_bar_sq)
    from .metrics import constraint_violation, penalty_objective

    pi = trace.column("Pi")
    summary = {
        "seed": built.seed,
        "variant": built.algo.variant,
        "n": problem.n,
        "gamma": built.algo.gamma,
        "lambda": built.mixing.lam,
        "T": built.algo.T,
        "Pi_final": float(pi[-1]),
        "Pi_min": float(np.nanmin(pi)) if np.any(np.isfinite(pi)) else math.nan,
        "F_initial": _safe(lambda: problem.objective(built.x0)),
        "F_final": _safe(lambda: problem.objective(xbar)),
        "F_bar_final": _safe(lambda: penalty_objective(xbar, problem)),
        "violation_final": constraint_violation(xbar, problem),
        "equality_max": eq[0],
        "consensus_ratio": theory.consensus_bound_slack,
        "random_time": result.random_time,
        "best_pi_time": result.best_pi_time,
        "wall_s": wall,
    }
    if problem.name == "quartic":
        summary["x_final"] = float(xbar[0])
        summary["distance_to_feasible"] = distance_to_feasible(float(xbar[0]))
    else:
        F0, F1 = summary["F_initial"], summary["F_final"]
        summary["reduction"] = (1.0 - F1 / F0) if F0 else math.nan
    teps = extract_T_epsilon(trace, epsilon)
    for eps in epsilon:
        summary[f"T_eps_{eps:g}"] = teps.get(eps)
    return RunOutcome(built, result, summary, theory.to_dict(), eq[0])


def _safe(fn):
    try:
        return float(fn())
    except Exception:  # objective values are optional diagnostics
        return math.nan


def run_manifest_entry(outcome: RunOutcome, trace_file: str) -> dict:
    b = outcome.built
    return {
        "seed": b.seed,
        "trace": trace_file,
        "graph_hash": graph_hash(b.graph, b.mixing) if b.graph is not None else None,
        "lambda": b.mixing.lam,
        "nu": b.mixing.nu,
        "algorithm": b.algo.to_dict(),
        "schedule": b.schedule.to_dict() if b.schedule else None,
        "clamp_warnings": b.schedule.warnings if b.schedule else [],
        "L": b.problem.L,
        "dimension": b.problem.d,
        "mc_budget": b.problem.mc_budget if b.problem.mean_grad is None else None,
        "theory": outcome.theory,
        "summary": outcome.summary,
        "info": outcome.result.info,
    }
