"""Decentralized penalty prox-linear solvers with momentum and gradient tracking.

Two variants share one driver:

* ``SMPL``: each agent solves a linearized-constraint proximal QP around its
  iterate with step size ``eta`` and the network mixes the solutions.
* ``SCAMPL``: each agent minimises a strongly convex quadratic surrogate
  (prox weight ``mu`` or a curvature matrix) and the network mixes a
  relaxed step ``x + alpha (x_check - x)``.

Both use the recursive momentum estimator ``z`` and a tracker ``y`` whose
network average equals the average of ``z``.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from ._keys import derive_key, generator
from .graph import MixingMatrix
from .metrics import (
    MetricsTrace,
    constraint_violation,
    consensus_error,
    gradient_variances,
    iterate_progress,
    network_kkt_residual,
    penalty_objective,
    tracking_error,
)
from .problems.base import MeanGradUnavailable, ProblemSpec
from .qp import QPInstance, QPSolution, SolverSettings, Status, solve_qp

log = logging.getLogger(__name__)

SMPL = "SMPL"
SCAMPL = "SCAMPL"
VARIANTS = (SMPL, SCAMPL)

_INIT_TAG = 0x1417
_STEP_TAG = 0x57E9
_OUTPUT_TAG = 0x0C71


class BadInit(ValueError):
    pass


class DegenerateSchedule(ValueError):
    pass


class SolverFailure(RuntimeError):
    pass


class NonFiniteIterate(RuntimeError):
    def __init__(self, message: str, trace: MetricsTrace):
        super().__init__(message)
        self.trace = trace


@dataclass
class AgentState:
    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    x_check: np.ndarray | None = None
    prev_sample_key: int | None = None
    # gradients at x^t and x^{t-1} under the sample that produced z^t
    grad_cur: np.ndarray | None = None
    grad_prev: np.ndarray | None = None
    z_prev: np.ndarray | None = None
    qp_warm: QPSolution | None = None


@dataclass
class AlgorithmConfig:
    variant: str = SCAMPL
    eta: float | None = None
    alpha: float | None = None
    mu: float | None = None
    beta: float = 1.0
    gamma: float = 2000.0
    b0: int = 1
    T: int = 100
    seed: int = 0
    threads: int = 1
    compute_pi: bool = True
    record_time: bool = True

    def __post_init__(self):
        self.variant = str(self.variant).upper()
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.variant == SMPL:
            if self.eta is None or not self.eta > 0:
                raise ValueError("SMPL needs eta > 0")
        else:
            if self.alpha is None or not 0 < self.alpha <= 1:
                raise ValueError("SCAMPL needs alpha in (0, 1]")
            if self.mu is None or not self.mu > 0:
                raise ValueError("SCAMPL needs mu > 0")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.gamma == 0:
            log.warning("gamma=0 disables the constraint penalty")
        if int(self.b0) < 1 or int(self.T) < 1:
            raise ValueError("b0 and T must be at least 1")
        self.b0, self.T, self.seed = int(self.b0), int(self.T), int(self.seed)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Snapshot:
    """Read-only view handed to hooks after iteration ``t``."""

    t: int
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    x_check: np.ndarray
    x_next: np.ndarray
    y_next: np.ndarray
    z_next: np.ndarray
    record: dict


@dataclass
class RunState:
    agents: list[AgentState]
    mixing: MixingMatrix
    problem: ProblemSpec
    cfg: AlgorithmConfig
    t: int = 1
    trace: MetricsTrace = field(default_factory=MetricsTrace)
    curvature: list[np.ndarray] | None = None
    info: dict = field(default_factory=dict)

    def stack(self, name: str) -> np.ndarray:
        return np.array([getattr(a, name) for a in self.agents])

    @property
    def mean_x(self) -> np.ndarray:
        return self.stack("x").mean(axis=0)


# ---------------------------------------------------------------- schedules


@dataclass
class Schedule:
    variant: str
    eta: float | None
    alpha: float | None
    mu: float | None
    beta: float
    b0: int
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def default_schedule(variant: str, n: int, nu: float, L: float, sigma_bar_sq: float, T: int, gamma: float,
                     mu: float | None = None, lam: float | None = None, strict: bool = False) -> Schedule:
    """Theory-driven step, momentum weight and initial batch.

    ``lam`` (spectral gap parameter) only enters the SCAMPL cap; ``mu``
    is required for SCAMPL. With ``strict`` any clamp raises
    :class:`DegenerateSchedule`; otherwise clamps are listed in ``warnings``.
    """
    variant = variant.upper()
    if n < 1 or nu <= 0 or L <= 0 or T < 1 or gamma < 0 or sigma_bar_sq < 0:
        raise ValueError("schedule inputs must be positive")
    base = math.inf if sigma_bar_sq == 0 else (n * n / (nu * nu * sigma_bar_sq * T)) ** (1.0 / 3.0)
    warnings: list[str] = []
    b0 = max(1, math.ceil((n * T) ** (1.0 / 3.0) - 1e-9))
    root = math.sqrt(2.0) / (13.0 * math.sqrt(3.0))
    if variant == SMPL:
        cap = min(1.0 / (1.0 + gamma), root / nu**2, math.sqrt(n) / (3.0 * nu)) / (8.0 * L)
        eta = min(base, cap)
        beta = 576.0 * nu**2 * L**2 * eta**2 / n
        alpha = None
    elif variant == SCAMPL:
        if mu is None or mu <= 0:
            raise ValueError("SCAMPL schedule needs mu > 0")
        lam_eff = lam if lam is not None and lam > 0 else 1.0
        cap = min(0.5, root / (lam_eff * nu**2), math.sqrt(n) / (3.0 * nu)) * mu / (8.0 * L)
        alpha = min(mu * base, cap)
        if alpha > 1.0:
            warnings.append(f"alpha={alpha:.6g} clamped to 1")
            alpha = 1.0
        beta = 576.0 * nu**2 * L**2 * alpha**2 / (n * mu**2)
        eta = None
    else:
        raise ValueError(f"unknown variant {variant!r}")
    if beta > 1.0:
        warnings.append(f"beta={beta:.6g} clamped to 1")
        beta = 1.0
    if strict and warnings:
        raise DegenerateSchedule("; ".join(warnings))
    return Schedule(variant, eta, alpha, mu if variant == SCAMPL else None, beta, b0, warnings)


# ---------------------------------------------------------------- assembly


def _constraint_block(agent_x: np.ndarray, problem: ProblemSpec):
    """Shared inequality/equality structure over variables ``(x, upsilon, s)``."""
    d = problem.d
    values, jac = problem.constraint_eval(agent_x)
    values = np.asarray(values, dtype=float).reshape(-1)
    jac = np.asarray(jac, dtype=float).reshape(values.size, d)
    m = values.size
    n_s = d if problem.regularizer is not None else 0
    nv = d + 1 + n_s
    A_in = np.zeros((m + 2 * n_s, nv))
    u = np.zeros(m + 2 * n_s)
    A_in[:m, :d] = jac
    A_in[:m, d] = -1.0
    u[:m] = jac @ agent_x - values
    if n_s:
        eye = np.eye(d)
        A_in[m : m + d, :d] = eye
        A_in[m : m + d, d + 1 :] = -eye
        A_in[m + d :, :d] = -eye
        A_in[m + d :, d + 1 :] = -eye
    lb = np.full(nv, -np.inf)
    lb[d] = 0.0
    A_eq = b_eq = None
    if problem.has_equalities:
        A_eq = np.zeros((problem.A_eq.shape[0], nv))
        A_eq[:, :d] = problem.A_eq
        b_eq = problem.b_eq
    return nv, A_in, u, A_eq, b_eq, lb


def _linear_costs(problem: ProblemSpec, nv: int, gamma: float) -> np.ndarray:
    q = np.zeros(nv)
    q[problem.d] = gamma
    if problem.regularizer is not None:
        q[problem.d + 1 :] = problem.regularizer.weights
    return q


def assemble_smpl_subproblem(agent: AgentState, problem: ProblemSpec, eta: float, gamma: float) -> QPInstance:
    """``<y, x> + ||x - x_i||^2 / (2 eta) + gamma * upsilon`` under linearized constraints."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    d = problem.d
    nv, A_in, u, A_eq, b_eq, lb = _constraint_block(agent.x, problem)
    P = np.zeros((nv, nv))
    P[:d, :d] = np.eye(d) / eta
    q = _linear_costs(problem, nv, gamma)
    q[:d] = agent.y - agent.x / eta
    return QPInstance(P, q, A_in, u, A_eq, b_eq, lb)


def scampl_linear_coefficient(agent: AgentState, beta: float) -> np.ndarray:
    """Surrogate gradient plus momentum correction plus tracking offset ``y - z``."""
    if agent.grad_cur is None or agent.grad_prev is None or agent.z_prev is None:
        base = agent.z
    else:
        base = agent.grad_cur + (1.0 - beta) * (agent.z_prev - agent.grad_prev)
    return base + (agent.y - agent.z)


def assemble_scampl_subproblem(agent: AgentState, problem: ProblemSpec, mu: float, gamma: float, beta: float,
                               curvature: np.ndarray | None = None) -> QPInstance:
    """Quadratic-surrogate subproblem; ``curvature`` (PSD, d x d) replaces ``mu * I`` when given."""
    if not mu > 0:
        raise ValueError("mu must be positive")
    d = problem.d
    nv, A_in, u, A_eq, b_eq, lb = _constraint_block(agent.x, problem)
    K = mu * np.eye(d) if curvature is None else np.asarray(curvature, dtype=float)
    P = np.zeros((nv, nv))
    P[:d, :d] = K
    q = _linear_costs(problem, nv, gamma)
    q[:d] = scampl_linear_coefficient(agent, beta) - K @ agent.x
    return QPInstance(P, q, A_in, u, A_eq, b_eq, lb)


def solve_subproblem(inst: QPInstance, d: int, warm: QPSolution | None = None,
                     settings: SolverSettings | None = None) -> QPSolution:
    """Solve after rescaling the objective so the proximal block has unit curvature.

    The minimiser is unchanged; the solver's absolute tolerances then act on
    a problem whose data magnitudes do not grow with ``1/eta`` or ``mu``.
    """
    scale = 1.0 / max(float(np.max(np.abs(np.diag(inst.P)[:d]))), 1e-300)
    sol = solve_qp(inst.rescaled(scale), settings, warm_start=warm)
    if sol.status is Status.INFEASIBLE:
        raise SolverFailure("subproblem reported infeasible (check equality constraints)")
    return sol


# ---------------------------------------------------------------- updates


def momentum_update(z: np.ndarray, grad_new: np.ndarray, grad_old_same_sample: np.ndarray, beta: float) -> np.ndarray:
    """Recursive momentum estimator; both gradients must come from the same sample."""
    if not 0 < beta <= 1:
        raise ValueError("beta must lie in (0, 1]")
    return grad_new + (1.0 - beta) * (z - grad_old_same_sample)


def _W(W) -> np.ndarray:
    return W.W if isinstance(W, MixingMatrix) else np.asarray(W, dtype=float)


def tracking_update(all_y: np.ndarray, z_new: np.ndarray, z_old: np.ndarray, W) -> np.ndarray:
    return _W(W) @ (np.asarray(all_y) + np.asarray(z_new) - np.asarray(z_old))


def consensus_x(all_xcheck: np.ndarray, all_x: np.ndarray, W, variant: str = SMPL, alpha: float = 1.0) -> np.ndarray:
    if variant.upper() == SMPL:
        return _W(W) @ np.asarray(all_xcheck)
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    X = np.asarray(all_x)
    return _W(W) @ (X + alpha * (np.asarray(all_xcheck) - X))


# ---------------------------------------------------------------- driver


def init_key(seed: int, agent: int, replicate: int) -> int:
    return derive_key(seed, _INIT_TAG, agent, replicate)


def step_key(seed: int, agent: int, t: int) -> int:
    return derive_key(seed, _STEP_TAG, agent, t)


def init_run(problem: ProblemSpec, mixing: MixingMatrix, cfg: AlgorithmConfig, x0: np.ndarray,
             curvature: list[np.ndarray] | None = None) -> RunState:
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != problem.d:
        raise BadInit(f"x0 has length {x0.size}, problem has d={problem.d}")
    if mixing.n != problem.n:
        raise BadInit(f"mixing matrix is for {mixing.n} agents, problem has {problem.n}")
    if problem.has_equalities and problem.equality_residual(x0) > 1e-9:
        raise BadInit(f"x0 violates equalities by {problem.equality_residual(x0):.3e}")
    agents = []
    for i in range(problem.n):
        draws = [problem.grad_oracle(i, x0, init_key(cfg.seed, i, r)) for r in range(cfg.b0)]
        z = np.mean(draws, axis=0) if cfg.b0 > 1 else np.asarray(draws[0], dtype=float).copy()
        agents.append(AgentState(x=x0.copy(), z=z, y=z.copy()))
    state = RunState(agents, mixing, problem, cfg, curvature=curvature)
    state.trace = MetricsTrace(mc_budget=problem.mc_budget if problem.mean_grad is None else None)
    if curvature is not None:
        kappa = max(float(np.max(np.linalg.eigvalsh(K))) for K in curvature) / (cfg.mu or 1.0)
        state.info["surrogate_kappa"] = kappa
    state.info.update(qp_maxiters=0, qp_solves=0, qp_iterations=0)
    return state


@dataclass
class RunResult:
    trace: MetricsTrace
    x_final: np.ndarray
    random_time: int
    random_iterate: np.ndarray
    best_pi_time: int | None
    best_pi_iterate: np.ndarray | None
    info: dict


def _map(pool, fn, n):
    if pool is None:
        return [fn(i) for i in range(n)]
    return list(pool.map(fn, range(n)))


def run(state: RunState, hooks: list[Callable[[Snapshot], None]] | None = None,
        settings: SolverSettings | None = None) -> RunResult:
    """Iterate from ``state.t`` to ``cfg.T`` and return the trace plus selected outputs."""
    cfg, problem, W = state.cfg, state.problem, state.mixing.W
    d, n = problem.d, problem.n
    hooks = hooks or []
    rng_out = generator(cfg.seed, _OUTPUT_TAG)
    random_time = int(rng_out.integers(1, cfg.T + 1))
    random_iterate = None
    best_pi, best_time, best_iterate = math.inf, None, None
    pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    try:
        for t in range(state.t, cfg.T + 1):
            tic = time.perf_counter()
            X, Y, Z = state.stack("x"), state.stack("y"), state.stack("z")

            def solve(i):
                ag = state.agents[i]
                if cfg.variant == SMPL:
                    inst = assemble_smpl_subproblem(ag, problem, cfg.eta, cfg.gamma)
                else:
                    K = None if state.curvature is None else state.curvature[i]
                    inst = assemble_scampl_subproblem(ag, problem, cfg.mu, cfg.gamma, cfg.beta, K)
                return solve_subproblem(inst, d, ag.qp_warm, settings)

            sols = _map(pool, solve, n)
            Xc = np.array([s.z[:d] for s in sols])
            for ag, s, xc in zip(state.agents, sols, Xc):
                ag.qp_warm, ag.x_check = s, xc.copy()
                state.info["qp_solves"] += 1
                state.info["qp_iterations"] += s.iterations
                if s.status is Status.MAX_ITERS:
                    state.info["qp_maxiters"] += 1
                    log.warning("subproblem hit max iterations at t=%d (primal %.2e, dual %.2e)",
                                t, s.primal_res, s.dual_res)
            X_next = consensus_x(Xc, X, W, cfg.variant, cfg.alpha or 1.0)

            def momentum(i):
                key = step_key(cfg.seed, i, t + 1)
                g_new = np.asarray(problem.grad_oracle(i, X_next[i], key), dtype=float)
                g_old = np.asarray(problem.grad_oracle(i, X[i], key), dtype=float)
                return key, g_new, g_old, momentum_update(Z[i], g_new, g_old, cfg.beta)

            moms = _map(pool, momentum, n)
            Z_next = np.array([m[3] for m in moms])
            Y_next = tracking_update(Y, Z_next, Z, W)

            record = _metrics(state, t, X, Y, Z, Xc)
            record["wall_ms"] = (time.perf_counter() - tic) * 1e3 if cfg.record_time else 0.0
            state.trace.append(**record)
            if cfg.compute_pi and record["Pi"] < best_pi:
                best_pi, best_time, best_iterate = record["Pi"], t, Xc.copy()
            if t == random_time:
                random_iterate = X.copy()

            if not (np.all(np.isfinite(X_next)) and np.all(np.isfinite(Y_next)) and np.all(np.isfinite(Z_next))):
                raise NonFiniteIterate(f"non-finite iterate after t={t}", state.trace)

            for i, ag in enumerate(state.agents):
                key, g_new, g_old, _ = moms[i]
                ag.z_prev, ag.grad_cur, ag.grad_prev = ag.z, g_new, g_old
                ag.x, ag.y, ag.z = X_next[i].copy(), Y_next[i].copy(), Z_next[i].copy()
                ag.prev_sample_key = key
            state.t = t + 1
            if hooks:
                snap = Snapshot(t, X, Y, Z, Xc, X_next, Y_next, Z_next, record)
                for hook in hooks:
                    hook(snap)
    finally:
        if pool is not None:
            pool.shutdown()
    return RunResult(
        trace=state.trace,
        x_final=state.stack("x"),
        random_time=random_time,
        random_iterate=random_iterate if random_iterate is not None else state.stack("x"),
        best_pi_time=best_time,
        best_pi_iterate=best_iterate,
        info={k: v for k, v in state.info.items() if not k.startswith("_")},
    )


def _metrics(state: RunState, t: int, X, Y, Z, Xc) -> dict:
    problem = state.problem
    xbar = X.mean(axis=0)
    try:
        phi, upsilon = gradient_variances(Z, X, problem)
    except MeanGradUnavailable:
        phi = upsilon = math.nan
    cache = state.info.setdefault("_pi_cache", {})
    Pi = network_kkt_residual(Xc, problem, problem.L, cache=cache) if state.cfg.compute_pi else math.nan
    try:
        F_bar = penalty_objective(xbar, problem)
    except MeanGradUnavailable:
        F_bar = math.nan
    return {
        "t": t,
        "theta": consensus_error(X),
        "delta": iterate_progress(Xc, X),
        "phi": phi,
        "upsilon": upsilon,
        "eps_track": tracking_error(Y),
        "Pi": Pi,
        "F_bar": F_bar,
        "violation": constraint_violation(xbar, problem),
    }


def run_algorithm(problem: ProblemSpec, mixing: MixingMatrix, cfg: AlgorithmConfig, x0: np.ndarray,
                  hooks=None, settings: SolverSettings | None = None, curvature=None) -> RunResult:
    """Convenience wrapper: :func:`init_run` followed by :func:`run`."""
    return run(init_run(problem, mixing, cfg, x0, curvature), hooks, settings)
