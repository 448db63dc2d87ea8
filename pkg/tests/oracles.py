"""Independent reference computations used to freeze expected values in tests.

Nothing here calls into the package's solvers; each routine is a brute-force
or closed-form route to the same answer.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def enumerate_qp(P, q, A_in, u, A_eq=None, b=None, tol=1e-9):
    """Minimise ``0.5 z'Pz + q'z`` over ``A_in z <= u, A_eq z = b`` by active-set enumeration.

    Every subset of inequality rows is treated as active; the KKT system is
    solved by least squares and the candidate kept when it is primal feasible,
    dual feasible and stationary. Returns ``(objective, z)`` of the best one.
    """
    n = q.size
    A_eq = np.zeros((0, n)) if A_eq is None else A_eq
    b = np.zeros(0) if b is None else b
    k, p = A_in.shape[0], A_eq.shape[0]
    best = (math.inf, None)
    max_active = n - p
    for size in range(0, min(k, max_active) + 1):
        for S in itertools.combinations(range(k), size):
            S = list(S)
            A = np.vstack([A_in[S], A_eq])
            rhs = np.concatenate([u[S], b])
            r = A.shape[0]
            K = np.block([[P, A.T], [A, np.zeros((r, r))]])
            sol, *_ = np.linalg.lstsq(K, np.concatenate([-q, rhs]), rcond=None)
            z, lam = sol[:n], sol[n:]
            if np.max(np.abs(K @ sol - np.concatenate([-q, rhs])), initial=0.0) > 1e-7:
                continue
            if size and np.min(lam[:size]) < -tol:
                continue
            if k and np.max(A_in @ z - u) > tol:
                continue
            obj = 0.5 * z @ P @ z + q @ z
            if obj < best[0]:
                best = (float(obj), z)
    return best


def smpl_penalized_objective_1d(grid, y, x_i, eta, gamma, values, grads):
    """Subproblem objective with the epigraph variable eliminated, on a 1-D grid."""
    lin = values[:, None] + grads[:, None] * (grid[None, :] - x_i)
    viol = np.maximum(0.0, lin.max(axis=0))
    return y * grid + (grid - x_i) ** 2 / (2.0 * eta) + gamma * viol


def single_constraint_prox(x_i, y, eta, gamma, g, a):
    """Closed form of ``min <y,x> + |x-x_i|^2/(2 eta) + gamma max(0, g + a'(x-x_i))``.

    Three KKT cases: constraint slack at the unconstrained step, penalty fully
    active, or the step lands on the linearized boundary.
    """
    x_free = x_i - eta * y
    lin = lambda x: g + a @ (x - x_i)  # noqa: E731
    if lin(x_free) <= 0.0:
        return x_free
    x_pen = x_i - eta * (y + gamma * a)
    if lin(x_pen) >= 0.0:
        return x_pen
    return x_free - lin(x_free) / (a @ a) * a


def grid_nnls_2d(M, v, hi=10.0, step=1e-3, linear_cost=None):
    """Exact grid minimum of ``|v + M lam|^2 (+ c'lam)`` over ``lam in {0, step, ..} ^2``.

    For each grid value of the first coordinate the objective is a convex
    quadratic in the second, so its grid minimiser is one of the two grid
    points bracketing the continuous minimiser.
    """
    c = np.zeros(2) if linear_cost is None else np.asarray(linear_cost, float)
    l1 = np.arange(0.0, hi + step / 2, step)
    r = v[None, :] + l1[:, None] * M[:, 0][None, :]  # residual before lam2
    m2 = M[:, 1]
    denom = m2 @ m2
    cont = -(r @ m2 + 0.5 * c[1]) / denom if denom > 0 else np.zeros_like(l1)
    cands = []
    for rnd in (np.floor, np.ceil):
        l2 = np.clip(rnd(cont / step) * step, 0.0, hi)
        res = r + l2[:, None] * m2[None, :]
        cands.append((np.sum(res * res, axis=1) + c[0] * l1 + c[1] * l2, l2))
    vals = np.minimum(cands[0][0], cands[1][0])
    j = int(np.argmin(vals))
    l2 = cands[0][1][j] if cands[0][0][j] <= cands[1][0][j] else cands[1][1][j]
    return float(vals[j]), np.array([l1[j], l2])


def lamb_oseen(centers, strengths, radii, x):
    """Direct per-vortex formula, looped."""
    out = np.zeros(2)
    for q, w, dl in zip(centers, strengths, radii):
        p = np.asarray(x, float) - q
        r2 = p @ p
        if r2 < 1e-18:
            continue
        out += w * np.array([-p[1], p[0]]) / (2 * math.pi * r2) * (1 - math.exp(-r2 / dl**2))
    return out


def central_difference(fn, x, h):
    x = np.asarray(x, float)
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g


def three_point_curvature(fn, grid, h):
    """Max ``|f(x+h) - 2 f(x) + f(x-h)| / h^2`` over a 1-D grid of a scalar function."""
    return max(abs(fn(x + h) - 2 * fn(x) + fn(x - h)) / h**2 for x in grid)


def lstsq_slope(xs, ys):
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    A = np.vstack([xs, np.ones_like(xs)]).T
    return float(np.linalg.lstsq(A, ys, rcond=None)[0][0])


def random_qp(rng, n_max=20, rows_max=30, k_max=10, singular=False):
    """Feasible random QP ``(P, q, A_in, u, A_eq, b)``.

    Feasibility comes from a planted point with random positive slacks. With
    ``singular`` the Hessian is rank deficient and a box keeps it bounded.
    """
    n = int(rng.integers(2, 7 if singular else n_max + 1))
    r = int(rng.integers(1, n)) if singular else n
    B = rng.standard_normal((n, r))
    P = B @ B.T + (0.0 if singular else 0.1) * np.eye(n)
    q = rng.standard_normal(n) * 3
    z0 = rng.standard_normal(n)
    if singular:
        zs = 0.1 * z0
        extra = rng.standard_normal((int(rng.integers(0, 3)), n))
        A_in = np.vstack([np.eye(n), -np.eye(n), extra])
        u = np.concatenate([np.full(2 * n, 3.5), extra @ zs + rng.uniform(0.1, 1.0, extra.shape[0])])
        A_eq = rng.standard_normal((int(rng.integers(0, 2)), n))
        return P, q, A_in, u, A_eq, A_eq @ zs
    k = int(rng.integers(1, min(k_max, rows_max) + 1))
    p = int(rng.integers(0, min(n - 1, rows_max - k) + 1))
    A_in = rng.standard_normal((k, n))
    u = A_in @ z0 + rng.uniform(0.0, 1.0, k) * (rng.random(k) < 0.7)
    A_eq = rng.standard_normal((p, n))
    b = A_eq @ z0
    return P, q, A_in, u, A_eq, b


def kkt_check(P, q, A_in, u, A_eq, b, z, mu, nu):
    """Fresh recomputation of primal, stationarity, sign and complementarity residuals (inf-norms)."""
    slack = A_in @ z - u if A_in.size else np.zeros(0)
    eq = A_eq @ z - b if A_eq.size else np.zeros(0)
    grad = P @ z + q
    if A_in.size:
        grad = grad + A_in.T @ mu
    if A_eq.size:
        grad = grad + A_eq.T @ nu
    primal = max([0.0] + list(slack) + list(np.abs(eq)))
    return {
        "primal": primal,
        "dual": float(np.max(np.abs(grad))),
        "sign": max([0.0] + list(-mu)),
        "comp": max([0.0] + list(np.abs(mu * slack))),
    }
