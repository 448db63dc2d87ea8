"""Communication graphs and doubly-stochastic mixing matrices."""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ._keys import generator

__all__ = [
    "CalibrationFailed",
    "DegenerateMixing",
    "DisconnectedGraph",
    "Graph",
    "MixingMatrix",
    "NotDoublyStochastic",
    "calibrate_radius",
    "complete_graph",
    "generate_random_geometric",
    "metropolis_weights",
    "path_graph",
    "spectral_gap",
    "star_graph",
]

DENSE_CUTOFF = 64
DEGENERATE_TOL = 1e-9
STOCHASTIC_TOL = 1e-9


class DisconnectedGraph(ValueError):
    pass


class NotDoublyStochastic(ValueError):
    pass


class DegenerateMixing(ValueError):
    pass


class CalibrationFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class Graph:
    """Undirected simple graph on nodes ``0..n-1``."""

    n: int
    edges: tuple[tuple[int, int], ...]
    positions: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("graph needs at least one node")
        normalized = set()
        for i, j in self.edges:
            i, j = int(i), int(j)
            if i == j:
                raise ValueError(f"self-loop at node {i}")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"edge ({i}, {j}) out of range")
            normalized.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", tuple(sorted(normalized)))

    @property
    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=int)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.n)]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        return adj

    @property
    def connected(self) -> bool:
        adj = self.neighbors()
        seen = {0}
        queue = deque([0])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        return len(seen) == self.n

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "edges": [list(e) for e in self.edges],
            "positions": None if self.positions is None else self.positions.tolist(),
        }


@dataclass(frozen=True)
class MixingMatrix:
    W: np.ndarray
    lam: float
    nu: float

    @property
    def n(self) -> int:
        return self.W.shape[0]

    def to_dict(self) -> dict:
        return {"W": self.W.tolist(), "lambda": self.lam, "nu": self.nu}


def graph_document(graph: Graph, mixing: MixingMatrix | None = None) -> dict:
    """JSON-ready document ``{n, edges, positions, W, lambda, nu}``."""
    doc = graph.to_dict()
    if mixing is not None:
        doc.update(mixing.to_dict())
    return doc


def graph_hash(graph: Graph, mixing: MixingMatrix | None = None) -> str:
    payload = json.dumps(graph_document(graph, mixing), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def complete_graph(n: int) -> Graph:
    return Graph(n, tuple((i, j) for i in range(n) for j in range(i + 1, n)))


def path_graph(n: int) -> Graph:
    return Graph(n, tuple((i, i + 1) for i in range(n - 1)))


def star_graph(n: int) -> Graph:
    return Graph(n, tuple((0, j) for j in range(1, n)))


def _pairwise_distances(positions: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    iu, ju = np.triu_indices(positions.shape[0], k=1)
    dist = np.linalg.norm(positions[iu] - positions[ju], axis=1)
    return iu, ju, dist


def _unit_square(n: int, *seed_parts: int) -> np.ndarray:
    return generator(*seed_parts).uniform(0.0, 1.0, size=(n, 2))


def generate_random_geometric(n: int, radius: float, seed: int) -> Graph:
    """Place ``n`` nodes uniformly in the unit square and join pairs closer than ``radius``.

    The output may be disconnected; callers check ``Graph.connected``.
    """
    if n < 2:
        raise ValueError("random geometric graph needs n >= 2")
    positions = _unit_square(n, seed)
    return _threshold_graph(positions, radius)


def _threshold_graph(positions: np.ndarray, radius: float) -> Graph:
    iu, ju, dist = _pairwise_distances(positions)
    keep = dist < radius
    return Graph(positions.shape[0], tuple(zip(iu[keep].tolist(), ju[keep].tolist())), positions)


def metropolis_weights(g: Graph) -> MixingMatrix:
    """Metropolis-Hastings weights ``W_ij = 1/(1 + max(deg_i, deg_j))`` on edges."""
    if not g.connected:
        raise DisconnectedGraph(f"graph on {g.n} nodes is not connected")
    deg = g.degrees
    W = np.zeros((g.n, g.n))
    for i, j in g.edges:
        w = 1.0 / (1.0 + max(deg[i], deg[j]))
        W[i, j] = w
        W[j, i] = w
    off = W.sum(axis=1)
    W[np.diag_indices(g.n)] = 1.0 - off
    lam, nu = spectral_gap(W)
    return MixingMatrix(W, lam, nu)


def check_doubly_stochastic(W: np.ndarray, tol: float = STOCHASTIC_TOL) -> None:
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise NotDoublyStochastic(f"W must be square, got shape {W.shape}")
    if np.any(W < -tol):
        raise NotDoublyStochastic("W has negative entries")
    if np.max(np.abs(W - W.T)) > tol:
        raise NotDoublyStochastic("W is not symmetric")
    row = np.max(np.abs(W.sum(axis=1) - 1.0))
    col = np.max(np.abs(W.sum(axis=0) - 1.0))
    if max(row, col) > tol:
        raise NotDoublyStochastic(f"row/column sums deviate from 1 by {max(row, col):.3e}")


def _power_norm(M: np.ndarray, tol: float, max_iters: int = 200_000) -> float:
    # Power iteration on the PSD matrix M^2 sidesteps +/- eigenvalue pairs. Stopping on
    # the eigen-residual ||M^2 v - rho v|| rather than on the change in rho keeps clustered
    # top eigenvalues from ending the loop early; the residual bounds the eigenvalue error.
    n = M.shape[0]
    v = generator(0x5EC7, n).standard_normal(n)
    v -= v.mean()
    nrm = np.linalg.norm(v)
    if nrm == 0.0:
        return 0.0
    v /= nrm
    rho = 0.0
    for _ in range(max_iters):
        w = M @ (M @ v)
        rho = float(v @ w)
        if rho <= 1e-300:
            return 0.0
        if np.linalg.norm(w - rho * v) <= tol * rho:
            break
        v = w / np.linalg.norm(w)
    return float(np.sqrt(rho))


def spectral_gap(W: np.ndarray, method: str = "auto", tol: float = 1e-10) -> tuple[float, float]:
    """Return ``(lam, nu)`` with ``lam = ||W - 11^T/n||`` and ``nu = 1/(1 - lam^2)``.

    ``method`` is ``"dense"``, ``"power"`` or ``"auto"`` (dense up to 64 nodes).
    Raises ``DegenerateMixing`` when ``lam`` is numerically 1.
    """
    W = np.asarray(W, dtype=float)
    check_doubly_stochastic(W)
    n = W.shape[0]
    M = W - np.full((n, n), 1.0 / n)
    if method == "auto":
        method = "dense" if n <= DENSE_CUTOFF else "power"
    if method == "dense":
        lam = float(np.max(np.abs(np.linalg.eigvalsh(M)))) if n > 1 else 0.0
    elif method == "power":
        lam = _power_norm(M, tol)
    else:
        raise ValueError(f"unknown method {method!r}")
    if lam >= 1.0 - DEGENERATE_TOL:
        raise DegenerateMixing(f"spectral norm {lam:.12f} is numerically 1 (graph disconnected?)")
    # W = J exactly gives round-off sized eigenvalues.
    if lam < 1e-14:
        lam = 0.0
    return lam, 1.0 / (1.0 - lam * lam)


def _lambda_or_one(g: Graph) -> tuple[float, MixingMatrix | None]:
    if not g.connected:
        return 1.0, None
    try:
        mix = metropolis_weights(g)
    except DegenerateMixing:
        return 1.0, None
    return mix.lam, mix


def calibrate_radius(
    n: int,
    target_lambda: float,
    tol: float,
    seed: int,
    max_rejects: int = 50,
) -> tuple[Graph, MixingMatrix, float]:
    """Find a connected random geometric graph whose Metropolis ``lam`` is within ``tol`` of target.

    The spectral norm is a step function of the radius for fixed positions, so
    the bisection runs over the sorted pairwise distances. When the bracket
    collapses without meeting ``tol`` the positions are resampled from a
    derived sub-seed, at most ``max_rejects`` times.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not 0.0 < target_lambda < 1.0:
        raise ValueError("target_lambda must lie in (0, 1)")
    if n < 2:
        raise ValueError("calibration needs n >= 2")
    for attempt in range(max_rejects + 1):
        positions = _unit_square(n, seed) if attempt == 0 else _unit_square(n, seed, attempt)
        _, _, dist = _pairwise_distances(positions)
        thresholds = np.unique(dist)
        # radius between consecutive distances: index k keeps pairs with dist <= thresholds[k]
        radii = np.append((thresholds[:-1] + thresholds[1:]) / 2.0, thresholds[-1] * 1.5 + 1e-9)

        cache: dict[int, tuple[float, MixingMatrix | None, Graph | None]] = {}

        def evaluate(k: int):
            if k not in cache:
                if k < 0:
                    cache[k] = (1.0, None, None)
                else:
                    g = _threshold_graph(positions, float(radii[k]))
                    lam, mix = _lambda_or_one(g)
                    cache[k] = (lam, mix, g)
            return cache[k]

        lo, hi = -1, len(radii) - 1
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if evaluate(mid)[0] > target_lambda:
                lo = mid
            else:
                hi = mid
        best = None
        for k in (lo, hi):
            lam, mix, g = evaluate(k)
            if mix is not None and abs(lam - target_lambda) <= tol:
                if best is None or abs(lam - target_lambda) < abs(best[1].lam - target_lambda):
                    best = (g, mix, float(radii[k]))
        if best is not None:
            return best
    raise CalibrationFailed(
        f"no graph with lambda within {tol} of {target_lambda} at n={n} after {max_rejects} resamples"
    )
