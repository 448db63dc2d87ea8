"""Error quantities, augmented KKT residual and theory-bound checks."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ._keys import generator
from .problems.base import MeanGradUnavailable, ProblemSpec
from .qp import QPInstance, SolverSettings, solve_qp

CSV_COLUMNS = ("t", "theta", "delta", "phi", "upsilon", "eps_track", "Pi", "F_bar", "violation", "wall_ms")
_SMOOTHNESS_TAG = 0x5300

__all__ = [
    "CSV_COLUMNS",
    "MeanGradUnavailable",
    "MetricsTrace",
    "TheoryDiagnostics",
    "check_cumulative_bounds",
    "consensus_error",
    "constraint_violation",
    "estimate_noise_variance",
    "estimate_smoothness",
    "extract_T_epsilon",
    "gradient_variances",
    "iterate_progress",
    "kkt_residual",
    "network_kkt_residual",
    "penalty_objective",
    "tracking_error",
]


def consensus_error(all_x: np.ndarray) -> float:
    X = np.atleast_2d(np.asarray(all_x, dtype=float))
    return float(np.sum((X - X.mean(axis=0)) ** 2))


def tracking_error(all_y: np.ndarray) -> float:
    return consensus_error(all_y)


def iterate_progress(all_xcheck: np.ndarray, all_x: np.ndarray) -> float:
    diff = np.asarray(all_xcheck, dtype=float) - np.asarray(all_x, dtype=float)
    return float(np.sum(diff * diff))


def gradient_variances(all_z: np.ndarray, all_x: np.ndarray, problem: ProblemSpec) -> tuple[float, float]:
    """Global and network gradient variances against the diagnostic mean gradient."""
    Z = np.atleast_2d(np.asarray(all_z, dtype=float))
    X = np.atleast_2d(np.asarray(all_x, dtype=float))
    G = np.array([problem.diagnostic_grad(i, X[i]) for i in range(Z.shape[0])])
    gap = Z - G
    phi = float(np.sum(gap.mean(axis=0) ** 2))
    upsilon = float(np.sum(gap * gap))
    return phi, upsilon


def constraint_violation(x: np.ndarray, problem: ProblemSpec) -> float:
    """Problem-specific summed violation; defaults to ``sum_k max(g_k, 0)``."""
    custom = problem.meta.get("violation")
    if custom is not None:
        return float(custom(x))
    values, _ = problem.constraint_eval(np.asarray(x, dtype=float))
    return float(np.sum(np.maximum(values, 0.0)))


def penalty_objective(x: np.ndarray, problem: ProblemSpec, objective=None) -> float:
    """``f(x) + h(x) + gamma * max_k [g_k(x)]_+``."""
    x = np.asarray(x, dtype=float)
    f = objective(x) if objective is not None else problem.objective(x)
    values, _ = problem.constraint_eval(x)
    worst = max(float(np.max(values, initial=-np.inf)), 0.0)
    return float(f + problem.h(x) + problem.gamma * worst)


def _kkt_multipliers(grad: np.ndarray, jac: np.ndarray, values: np.ndarray, settings: SolverSettings | None,
                     warm=None):
    # min_{lam >= 0} ||grad + jac' lam||^2 + |g|' lam, as one QP
    M = jac.T
    inst = QPInstance(P=2.0 * M.T @ M, q=2.0 * M.T @ grad + np.abs(values), lb=np.zeros(values.size))
    sol = solve_qp(inst, settings, warm_start=warm)
    return np.maximum(sol.z, 0.0), sol


def kkt_residual(
    x_check: np.ndarray,
    problem: ProblemSpec,
    grad: np.ndarray,
    L: float,
    center: np.ndarray | None = None,
    settings: SolverSettings | None = None,
    cache: dict | None = None,
    cache_key=None,
) -> float:
    """Augmented KKT residual of one agent.

    Stationarity plus complementarity minimised over nonnegative multipliers,
    plus the worst violation, plus ``L^2 ||x_check - center||^2`` where
    ``center`` is the network average of the subproblem solutions. ``cache``
    (a dict) keeps the inner QP solution under ``cache_key`` for warm starts.
    """
    x_check = np.asarray(x_check, dtype=float)
    grad = np.asarray(grad, dtype=float)
    values, jac = problem.constraint_eval(x_check)
    values = np.asarray(values, dtype=float)
    jac = np.atleast_2d(np.asarray(jac, dtype=float))
    if values.size:
        warm = None if cache is None else cache.get(cache_key)
        lam, sol = _kkt_multipliers(grad, jac, values, settings, warm)
        if cache is not None:
            cache[cache_key] = sol
        stat = grad + jac.T @ lam
        comp = float(np.sum(lam * np.abs(values)))
        viol = max(float(np.max(values)), 0.0)
    else:
        stat, comp, viol = grad, 0.0, 0.0
    cons = 0.0
    if center is not None:
        diff = x_check - np.asarray(center, dtype=float)
        cons = float(L * L * diff @ diff)
    return float(stat @ stat) + comp + viol + cons


def network_kkt_residual(all_xcheck: np.ndarray, problem: ProblemSpec, L: float,
                         grads: np.ndarray | None = None, cache: dict | None = None) -> float:
    """Average of the per-agent residuals; gradients default to the diagnostic mean gradients."""
    Xc = np.atleast_2d(np.asarray(all_xcheck, dtype=float))
    center = Xc.mean(axis=0)
    if grads is None:
        grads = [problem.diagnostic_grad(i, Xc[i]) for i in range(Xc.shape[0])]
    vals = [kkt_residual(Xc[i], problem, grads[i], L, center, cache=cache, cache_key=i) for i in range(Xc.shape[0])]
    return float(np.mean(vals))


def _sym_norm(H: np.ndarray) -> float:
    H = 0.5 * (H + H.T)
    return float(np.max(np.abs(np.linalg.eigvalsh(H))))


def estimate_smoothness(problem: ProblemSpec, box: np.ndarray, grid_points: int, h: float | None = None) -> float:
    """Largest central-difference Hessian norm of the mean objective and of each constraint.

    For ``d == 1`` the points form a uniform grid over the interval; for
    larger ``d`` the points are drawn uniformly from the box (fixed seed) and
    the box center is always included.
    """
    box = np.atleast_2d(np.asarray(box, dtype=float))
    d = problem.d
    if box.shape != (d, 2):
        raise ValueError(f"box must have shape ({d}, 2)")
    lo, hi = box[:, 0], box[:, 1]
    if h is None:
        h = 1e-4 * max(1.0, float(np.max(hi - lo)))
    if d == 1:
        pts = np.linspace(lo[0], hi[0], grid_points)[:, None]
    else:
        rng = generator(_SMOOTHNESS_TAG, d, grid_points)
        pts = np.vstack([(lo + hi) / 2.0, lo + (hi - lo) * rng.random((max(grid_points - 1, 0), d))])

    def mean_grad(x):
        return problem.global_mean_grad(x)

    best = 0.0
    eye = np.eye(d)
    for x in pts:
        H_f = np.empty((d, d))
        H_g = np.empty((problem.m, d, d))
        for j in range(d):
            xp, xm = x + h * eye[j], x - h * eye[j]
            H_f[:, j] = (mean_grad(xp) - mean_grad(xm)) / (2.0 * h)
            if problem.m:
                H_g[:, :, j] = (problem.constraint_eval(xp)[1] - problem.constraint_eval(xm)[1]) / (2.0 * h)
        best = max(best, _sym_norm(H_f), *(_sym_norm(Hk) for Hk in H_g))
    return best


def estimate_noise_variance(problem: ProblemSpec, x: np.ndarray, samples: int = 64, seed: int = 0) -> float:
    """Average over agents of the empirical ``E||grad(x, xi) - mean grad(x)||^2``."""
    from ._keys import derive_key

    x = np.asarray(x, dtype=float)
    total = 0.0
    for i in range(problem.n):
        ref = problem.diagnostic_grad(i, x)
        draws = np.array([problem.grad_oracle(i, x, derive_key(seed, 0x5157, i, s)) for s in range(samples)])
        total += float(np.mean(np.sum((draws - ref) ** 2, axis=1)))
    return total / problem.n


class MetricsTrace:
    """Per-iteration metric records with CSV round-tripping."""

    def __init__(self, mc_budget: int | None = None):
        self.records: list[dict] = []
        self.mc_budget = mc_budget

    def append(self, **row) -> None:
        missing = [c for c in CSV_COLUMNS if c not in row]
        if missing:
            raise KeyError(f"missing trace columns {missing}")
        self.records.append({c: row[c] for c in CSV_COLUMNS})

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=float)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            w.writeheader()
            for r in self.records:
                w.writerow({k: (int(v) if k == "t" else repr(float(v))) for k, v in r.items()})

    @classmethod
    def from_csv(cls, path) -> "MetricsTrace":
        tr = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                tr.records.append({k: (int(row[k]) if k == "t" else float(row[k])) for k in CSV_COLUMNS})
        return tr


def extract_T_epsilon(trace, epsilon_list) -> dict:
    """First iteration at which the KKT residual is at most each epsilon (absent when never)."""
    if isinstance(trace, MetricsTrace):
        t_vals, pi = trace.column("t").astype(int), trace.column("Pi")
    else:
        pi = np.asarray(trace, dtype=float)
        t_vals = np.arange(1, pi.size + 1)
    out = {}
    for eps in epsilon_list:
        hits = np.flatnonzero(pi <= eps)
        if hits.size:
            out[eps] = int(t_vals[hits[0]])
    return out


@dataclass
class TheoryDiagnostics:
    lam: float
    nu: float
    L_estimate: float | None = None
    sigma_bar_sq_estimate: float | None = None
    consensus_lhs: float = 0.0
    consensus_rhs: float = 0.0
    consensus_bound_slack: float = 0.0
    descent_violations: int = 0
    extra: dict = field(default_factory=dict)

    def holds(self, rtol: float = 1e-9) -> bool:
        return self.consensus_lhs <= self.consensus_rhs * (1.0 + rtol) + 1e-300

    def to_dict(self) -> dict:
        out = asdict(self)
        if math.isinf(out["consensus_bound_slack"]):
            out["consensus_bound_slack"] = "inf"
        return out


def check_cumulative_bounds(trace, nu: float, lam: float, variant: str = "SMPL", alpha: float = 1.0,
                            L_estimate: float | None = None, sigma_bar_sq_estimate: float | None = None,
                            descent_tol: float = 1e-9) -> TheoryDiagnostics:
    """Realized consensus accumulation ``sum theta <= 4 nu^2 lam^2 (alpha^2) sum delta``.

    ``theta`` is summed over all recorded iterations, ``delta`` over all but
    the last. The ratio is 0 when both sides vanish.
    """
    theta = trace.column("theta") if isinstance(trace, MetricsTrace) else np.asarray(trace["theta"], dtype=float)
    delta = trace.column("delta") if isinstance(trace, MetricsTrace) else np.asarray(trace["delta"], dtype=float)
    F = trace.column("F_bar") if isinstance(trace, MetricsTrace) else np.asarray(trace.get("F_bar", []), dtype=float)
    scale = 4.0 * nu * nu * lam * lam
    if variant.upper() == "SCAMPL":
        scale *= alpha * alpha
    lhs = float(np.sum(theta))
    rhs = float(scale * np.sum(delta[:-1]))
    if lhs == 0.0:
        ratio = 0.0
    elif rhs == 0.0:
        ratio = math.inf
    else:
        ratio = lhs / rhs
    F = F[np.isfinite(F)]
    descents = int(np.sum(np.diff(F) > descent_tol)) if F.size > 1 else 0
    return TheoryDiagnostics(
        lam=float(lam),
        nu=float(nu),
        L_estimate=L_estimate,
        sigma_bar_sq_estimate=sigma_bar_sq_estimate,
        consensus_lhs=lhs,
        consensus_rhs=rhs,
        consensus_bound_slack=ratio,
        descent_violations=descents,
    )
