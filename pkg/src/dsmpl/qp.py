"""Dense convex QP solver for the per-iteration subproblems.

Solves::

    minimize    0.5 z'Pz + q'z
    subject to  A_in z <= u,  A_eq z = b,  z >= lb

with an ADMM operator-splitting iteration in the style of OSQP (regularized
linear system, projection onto the constraint box, dual ascent), followed by
a polishing step that solves the KKT system restricted to the guessed active
set. A solution is only reported as ``SOLVED`` after an independent residual
check of the returned primal/dual pair.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

__all__ = [
    "QPInstance",
    "QPSolution",
    "SolverSettings",
    "Status",
    "kkt_residuals",
    "read_triplets",
    "solve_nnls",
    "solve_qp",
    "write_triplets",
]


class Status(str, enum.Enum):
    SOLVED = "Solved"
    MAX_ITERS = "MaxIters"
    INFEASIBLE = "Infeasible"


@dataclass
class QPInstance:
    P: np.ndarray
    q: np.ndarray
    A_in: np.ndarray | None = None
    u: np.ndarray | None = None
    A_eq: np.ndarray | None = None
    b: np.ndarray | None = None
    lb: np.ndarray | None = None

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        self.q = np.asarray(self.q, dtype=float).reshape(-1)
        n = self.q.size
        if self.P.shape != (n, n):
            raise ValueError(f"P has shape {self.P.shape}, expected {(n, n)}")
        if np.max(np.abs(self.P - self.P.T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(self.P), initial=0.0)):
            raise ValueError("P is not symmetric")
        self.A_in, self.u = _rows(self.A_in, self.u, n, "A_in")
        self.A_eq, self.b = _rows(self.A_eq, self.b, n, "A_eq")
        if self.lb is None:
            self.lb = np.full(n, -np.inf)
        else:
            self.lb = np.asarray(self.lb, dtype=float).reshape(-1)
            if self.lb.size != n:
                raise ValueError("lb has wrong length")

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def k(self) -> int:
        return self.A_in.shape[0]

    @property
    def p(self) -> int:
        return self.A_eq.shape[0]

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.P @ z + self.q @ z)

    def rescaled(self, factor: float) -> "QPInstance":
        """Same feasible set with the objective multiplied by ``factor`` (skips re-validation)."""
        out = object.__new__(QPInstance)
        out.__dict__.update(self.__dict__)
        out.P = self.P * factor
        out.q = self.q * factor
        return out


def _rows(A, rhs, n, name):
    if A is None or np.size(A) == 0:
        return np.zeros((0, n)), np.zeros(0)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    rhs = np.asarray(rhs, dtype=float).reshape(-1)
    if A.shape != (rhs.size, n):
        raise ValueError(f"{name} has shape {A.shape}, rhs has {rhs.size} entries, n={n}")
    return A, rhs


@dataclass
class QPSolution:
    z: np.ndarray
    duals: np.ndarray  # inequality multipliers (>= 0) then equality multipliers
    bound_duals: np.ndarray  # multipliers of z >= lb (>= 0)
    status: Status
    primal_res: float
    dual_res: float
    iterations: int = 0
    polished: bool = False
    _y: np.ndarray | None = field(default=None, repr=False)

    @property
    def solved(self) -> bool:
        return self.status is Status.SOLVED


@dataclass
class SolverSettings:
    eps_primal: float = 1e-8
    eps_dual: float = 1e-8
    max_iters: int = 20000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    adaptive_rho_interval: int = 50
    check_interval: int = 25
    polish: bool = True
    polish_passes: int = 12
    eps_infeasible: float = 1e-6
    # try the active-set repair loop from an empty guess before any splitting iterations
    active_set_first: bool = True
    warm_start: QPSolution | None = None

    def __post_init__(self):
        if self.eps_primal <= 0 or self.eps_dual <= 0:
            raise ValueError("tolerances must be positive")


class _Stacked:
    """All constraints as ``l <= A z <= u_all``; rows ordered (in, eq, bounds)."""

    def __init__(self, inst: QPInstance):
        self.inst = inst
        n = inst.n
        self.bidx = np.flatnonzero(np.isfinite(inst.lb))
        E = np.zeros((self.bidx.size, n))
        E[np.arange(self.bidx.size), self.bidx] = 1.0
        self.A = np.vstack([inst.A_in, inst.A_eq, E])
        self.l = np.concatenate([np.full(inst.k, -np.inf), inst.b, inst.lb[self.bidx]])
        self.u = np.concatenate([inst.u, inst.b, np.full(self.bidx.size, np.inf)])
        self.eq = np.zeros(self.l.size, dtype=bool)
        self.eq[inst.k : inst.k + inst.p] = True

    @property
    def rows(self) -> int:
        return self.l.size

    def split(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        inst = self.inst
        duals = y[: inst.k + inst.p].copy()
        bound = np.zeros(inst.n)
        bound[self.bidx] = -y[inst.k + inst.p :]
        return duals, bound


def _amax(a: np.ndarray) -> float:
    return float(a.max()) if a.size else 0.0


def kkt_residuals(inst: QPInstance, z: np.ndarray, duals: np.ndarray, bound_duals: np.ndarray) -> dict:
    """Primal infeasibility, stationarity, multiplier sign and complementarity (inf-norms)."""
    k = inst.k
    mu = duals[:k]
    nu = duals[k:]
    slack = inst.A_in @ z - inst.u
    bgap = np.where(np.isfinite(inst.lb), inst.lb - z, 0.0)
    primal = max(_amax(slack), _amax(np.abs(inst.A_eq @ z - inst.b)), _amax(bgap), 0.0)
    grad = inst.P @ z + inst.q - bound_duals
    if k:
        grad += inst.A_in.T @ mu
    if nu.size:
        grad += inst.A_eq.T @ nu
    sign = max(0.0, _amax(-mu), _amax(-bound_duals))
    comp = max(_amax(np.abs(mu * slack)), _amax(np.abs(bound_duals * bgap)))
    return {"primal": primal, "dual": _amax(np.abs(grad)), "sign": sign, "comp": comp}


def _certified(res: dict, settings: SolverSettings) -> bool:
    return (
        res["primal"] <= settings.eps_primal
        and res["dual"] <= settings.eps_dual
        and res["sign"] <= settings.eps_dual
        and res["comp"] <= max(settings.eps_primal, settings.eps_dual)
    )


def _solve_kkt(P, q, A_act, b_act):
    n, m = P.shape[0], A_act.shape[0]
    K = np.zeros((n + m, n + m))
    K[:n, :n] = P
    K[:n, n:] = A_act.T
    K[n:, :n] = A_act
    rhs = np.concatenate([-q, b_act])
    try:
        sol = np.linalg.solve(K, rhs)
        ok = np.all(np.isfinite(sol)) and np.max(np.abs(K @ sol - rhs)) <= 1e-12 * (1.0 + np.max(np.abs(rhs)))
    except np.linalg.LinAlgError:
        ok = False
    if not ok:
        # singular (rank-deficient P or dependent active rows): least-squares plus one refinement step
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
        sol = sol + np.linalg.lstsq(K, rhs - K @ sol, rcond=None)[0]
    return sol[:n], sol[n:]


def _polish(st: _Stacked, active_lo: np.ndarray, active_up: np.ndarray, settings: SolverSettings):
    """Solve the equality-constrained QP on a guessed active set, repairing the guess a few times."""
    inst = st.inst
    A, l, u = st.A, st.l, st.u
    lo = active_lo.copy()
    up = active_up.copy()
    lo[st.eq] = False
    up[st.eq] = True
    seen = set()
    for _ in range(settings.polish_passes):
        key = (lo.tobytes(), up.tobytes())
        if key in seen:
            break
        seen.add(key)
        act = np.flatnonzero(lo | up)
        target = np.where(up[act], u[act], l[act])
        z, y_act = _solve_kkt(inst.P, inst.q, A[act], target)
        y = np.zeros(st.rows)
        y[act] = y_act
        duals, bound = st.split(y)
        if not np.all(np.isfinite(z)):
            break
        res = kkt_residuals(inst, z, duals, bound)
        if _certified(res, settings):
            return z, y, res
        # drop the worst wrong-signed multiplier, else add the most violated row
        wrong = np.where(up & ~st.eq, -y, 0.0) + np.where(lo, y, 0.0)
        Az = A @ z
        viol = np.maximum(Az - u, 0.0) + np.maximum(l - Az, 0.0)
        viol[lo | up] = 0.0
        if np.max(wrong, initial=0.0) > settings.eps_dual and np.max(wrong) >= np.max(viol, initial=0.0):
            i = int(np.argmax(wrong))
            lo[i] = up[i] = False
        elif np.max(viol, initial=0.0) > settings.eps_primal:
            i = int(np.argmax(viol))
            if Az[i] > u[i]:
                up[i] = True
            else:
                lo[i] = True
        else:
            break
    return None


def _guess_active(st: _Stacked, Az: np.ndarray, y: np.ndarray):
    lo = (Az - st.l) < -y
    up = (st.u - Az) < y
    return lo & np.isfinite(st.l), up & np.isfinite(st.u)


def _finish(st: _Stacked, z, y, res, status, iters, polished) -> QPSolution:
    duals, bound = st.split(y)
    return QPSolution(
        z=z,
        duals=duals,
        bound_duals=bound,
        status=status,
        primal_res=res["primal"],
        dual_res=res["dual"],
        iterations=iters,
        polished=polished,
        _y=y,
    )


_DEFAULT_SETTINGS = SolverSettings()


def solve_qp(inst: QPInstance, settings: SolverSettings | None = None,
             warm_start: QPSolution | None = None) -> QPSolution:
    """Solve a convex QP; see module docstring for the formulation.

    ``warm_start`` overrides ``settings.warm_start`` when given.
    """
    settings = settings or _DEFAULT_SETTINGS
    st = _Stacked(inst)
    n, rows = inst.n, st.rows
    P, q = inst.P, inst.q

    warm = warm_start if warm_start is not None else settings.warm_start
    if warm is not None and (warm.z.size != n or warm._y is None or warm._y.size != rows):
        warm = None

    if rows == 0:
        z = np.linalg.lstsq(P, -q, rcond=None)[0]
        y = np.zeros(0)
        res = kkt_residuals(inst, z, np.zeros(0), np.zeros(n))
        status = Status.SOLVED if _certified(res, settings) else Status.INFEASIBLE
        return _finish(st, z, y, res, status, 0, True)

    if warm is not None and settings.polish:
        Az = st.A @ warm.z
        lo, up = _guess_active(st, Az, warm._y)
        out = _polish(st, lo, up, settings)
        if out is not None:
            return _finish(st, out[0], out[1], out[2], Status.SOLVED, 0, True)
    elif settings.polish and settings.active_set_first:
        none = np.zeros(rows, dtype=bool)
        out = _polish(st, none, none.copy(), settings)
        if out is not None:
            return _finish(st, out[0], out[1], out[2], Status.SOLVED, 0, True)

    # row equilibration for the splitting phase
    norms = np.linalg.norm(st.A, axis=1)
    norms[norms == 0.0] = 1.0
    D = 1.0 / norms
    As = st.A * D[:, None]
    ls, us = st.l * D, st.u * D

    if warm is not None:
        x = warm.z.copy()
        zc = np.clip(As @ x, ls, us)
        y = warm._y / D
    else:
        x = np.zeros(n)
        zc = np.clip(As @ x, ls, us)
        y = np.zeros(rows)

    rho0 = settings.rho

    def rho_vector(r):
        vec = np.full(rows, r)
        vec[st.eq] = 1e3 * r
        return vec

    rho = rho_vector(rho0)
    sigma, alpha = settings.sigma, settings.alpha
    factor = cho_factor(P + sigma * np.eye(n) + As.T @ (rho[:, None] * As))

    best = None
    y_prev = y.copy()
    it = 0
    for it in range(1, settings.max_iters + 1):
        rhs = sigma * x - q + As.T @ (rho * zc - y)
        xt = cho_solve(factor, rhs)
        zt = As @ xt
        x_new = alpha * xt + (1.0 - alpha) * x
        z_rel = alpha * zt + (1.0 - alpha) * zc
        z_new = np.clip(z_rel + y / rho, ls, us)
        y = y + rho * (z_rel - z_new)
        x, zc = x_new, z_new

        if it % settings.check_interval == 0 or it == settings.max_iters:
            y_un = y * D
            duals, bound = st.split(y_un)
            res = kkt_residuals(inst, x, duals, bound)
            if best is None or max(res.values()) < max(best[2].values()):
                best = (x.copy(), y_un.copy(), res)
            if settings.polish:
                lo, up = _guess_active(st, st.A @ x, y_un)
                out = _polish(st, lo, up, settings)
                if out is not None:
                    return _finish(st, out[0], out[1], out[2], Status.SOLVED, it, True)
            if _certified(res, settings):
                return _finish(st, x.copy(), y_un, res, Status.SOLVED, it, False)
            if _primal_infeasible(As, ls, us, y - y_prev, settings.eps_infeasible):
                return _finish(st, x.copy(), y_un, res, Status.INFEASIBLE, it, False)
            y_prev = y.copy()

        if it % settings.adaptive_rho_interval == 0:
            r_p = np.max(np.abs(As @ x - zc))
            r_d = np.max(np.abs(P @ x + q + As.T @ y))
            sp = max(np.max(np.abs(As @ x)), np.max(np.abs(zc)), 1e-30)
            sd = max(np.max(np.abs(P @ x)), np.max(np.abs(As.T @ y)), np.max(np.abs(q)), 1e-30)
            scale = np.sqrt((r_p / sp) / max(r_d / sd, 1e-30))
            new_rho0 = float(np.clip(rho0 * scale, 1e-6, 1e6))
            if new_rho0 > 5.0 * rho0 or new_rho0 < 0.2 * rho0:
                rho0 = new_rho0
                rho = rho_vector(rho0)
                factor = cho_factor(P + sigma * np.eye(n) + As.T @ (rho[:, None] * As))

    z, y_un, res = best
    return _finish(st, z, y_un, res, Status.MAX_ITERS, it, False)


def _primal_infeasible(As, ls, us, dy, eps) -> bool:
    nrm = np.max(np.abs(dy), initial=0.0)
    if nrm <= 1e-12:
        return False
    if np.max(np.abs(As.T @ dy)) > eps * nrm:
        return False
    pos = np.maximum(dy, 0.0)
    neg = np.minimum(dy, 0.0)
    if np.any((pos > 0) & ~np.isfinite(us)) or np.any((neg < 0) & ~np.isfinite(ls)):
        return False
    support = np.sum(np.where(np.isfinite(us), us, 0.0) * pos) + np.sum(np.where(np.isfinite(ls), ls, 0.0) * neg)
    return support < -eps * nrm


def solve_nnls(M: np.ndarray, v: np.ndarray, linear_cost: np.ndarray | None = None,
               settings: SolverSettings | None = None) -> np.ndarray:
    """``argmin_{lam >= 0} ||v + M lam||^2 (+ linear_cost' lam)`` through :func:`solve_qp`.

    Columns of ``M`` are constraint gradients and ``v`` is the objective gradient.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    v = np.asarray(v, dtype=float).reshape(-1)
    m = M.shape[1]
    q = M.T @ v
    if linear_cost is not None:
        q = q + 0.5 * np.asarray(linear_cost, dtype=float)
    inst = QPInstance(P=M.T @ M, q=q, lb=np.zeros(m))
    sol = solve_qp(inst, settings)
    return np.maximum(sol.z, 0.0)


def write_triplets(inst: QPInstance, path) -> None:
    """Dump an instance as ``section i j value`` lines (0-based, nonzeros only)."""
    lines = [f"dims {inst.n} {inst.k} {inst.p}"]

    def mat(tag, M):
        for i, j in zip(*np.nonzero(M)):
            lines.append(f"{tag} {i} {j} {float(M[i, j])!r}")

    def vec(tag, v):
        for i, val in enumerate(v):
            if val != 0.0:
                lines.append(f"{tag} {i} 0 {float(val)!r}")

    mat("P", inst.P)
    vec("q", inst.q)
    mat("A_in", inst.A_in)
    vec("u", inst.u)
    mat("A_eq", inst.A_eq)
    vec("b", inst.b)
    vec("lb", np.where(np.isfinite(inst.lb), inst.lb, 0.0))
    for i in np.flatnonzero(np.isinf(inst.lb)):
        lines.append(f"lb {i} 0 -inf")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_triplets(path) -> QPInstance:
    with open(path, encoding="utf-8") as fh:
        rows = [line.split() for line in fh if line.strip()]
    n, k, p = (int(v) for v in rows[0][1:])
    P, q = np.zeros((n, n)), np.zeros(n)
    A_in, u = np.zeros((k, n)), np.zeros(k)
    A_eq, b = np.zeros((p, n)), np.zeros(p)
    lb = np.zeros(n)
    mats = {"P": P, "A_in": A_in, "A_eq": A_eq}
    vecs = {"q": q, "u": u, "b": b, "lb": lb}
    for tag, i, j, val in rows[1:]:
        if tag in mats:
            mats[tag][int(i), int(j)] = float(val)
        else:
            vecs[tag][int(i)] = float(val)
    return QPInstance(P, q, A_in, u, A_eq, b, lb)
