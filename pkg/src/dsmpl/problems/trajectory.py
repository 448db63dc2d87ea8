"""Energy-efficient formation trajectory planning through uncertain currents.

Decision vector layout: USV ``j``, waypoint ``tau`` (1..T), coordinate ``c``
maps to index ``(j * T + tau - 1) * 2 + c``. The start waypoints are data,
the terminal waypoints are pinned by equalities.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .._keys import derive_key, generator, stream
from .base import InvalidProblem, ProblemSpec
from .vortex import VortexField, velocity_and_jacobian

MC_BUDGET = 256
_SHIFT_TAG = 0x5A1F
_MC_TAG = 0x3C3C


class InfeasibleFormation(InvalidProblem):
    pass


PAPER_VORTICES = VortexField(
    centers=np.array([[50.0, 120.0], [100.0, 80.0], [150.0, 120.0]]),
    strengths=np.array([-60.0, 60.0, -30.0]),
    radii=np.array([20.0, 20.0, 10.0]),
)


@dataclass(frozen=True)
class TrajectoryParams:
    N: int
    T_wp: int
    T_f: float
    starts: np.ndarray
    goals: np.ndarray
    formation: np.ndarray
    v_max: float
    base_field: VortexField
    center_jitter: float = 5.0
    noise_sigma: float = 0.1
    field_seed: int = 0
    mc_budget: int = MC_BUDGET
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        starts = np.asarray(self.starts, dtype=float).reshape(self.N, 2)
        goals = np.asarray(self.goals, dtype=float).reshape(self.N, 2)
        F = np.atleast_2d(np.asarray(self.formation, dtype=float)) if np.size(self.formation) else np.zeros((0, 2 * self.N))
        if F.shape[1] != 2 * self.N:
            raise InvalidProblem(f"formation rows must have {2 * self.N} columns, got {F.shape[1]}")
        if self.T_wp < 1 or self.T_f <= 0:
            raise InvalidProblem("need T_wp >= 1 and T_f > 0")
        object.__setattr__(self, "starts", starts)
        object.__setattr__(self, "goals", goals)
        object.__setattr__(self, "formation", F)

    @property
    def delta_t(self) -> float:
        return self.T_f / self.T_wp

    @property
    def d(self) -> int:
        return 2 * self.N * self.T_wp

    @property
    def step_cap(self) -> float:
        return self.v_max * self.delta_t

    def waypoints(self, x: np.ndarray) -> np.ndarray:
        """Full ``(N, T+1, 2)`` array including the start positions."""
        body = np.asarray(x, dtype=float).reshape(self.N, self.T_wp, 2)
        return np.concatenate([self.starts[:, None, :], body], axis=1)

    def straight_line(self) -> np.ndarray:
        frac = np.arange(1, self.T_wp + 1) / self.T_wp
        path = self.starts[:, None, :] + frac[None, :, None] * (self.goals - self.starts)[:, None, :]
        return path.reshape(-1)

    def agent_field(self, agent: int) -> VortexField:
        shift = generator(self.field_seed, agent, _SHIFT_TAG).uniform(
            -self.center_jitter, self.center_jitter, size=(self.base_field.M, 2)
        )
        return self.base_field.shifted(shift)

    def noise_factor(self, agent: int, sample_key: int) -> np.ndarray:
        e = stream(sample_key, agent).standard_normal(2) * self.noise_sigma
        return 1.0 + e


def sample_forecast(params: TrajectoryParams, agent: int, sample_key: int):
    """Realized current map ``x -> (I + diag(e)) v(x; shifted centers)`` for one forecast sample."""
    fld = params.agent_field(agent)
    factor = params.noise_factor(agent, sample_key)

    def forecast(x: np.ndarray) -> np.ndarray:
        return factor * velocity_and_jacobian(fld, x)[0]

    return forecast


def _objective_and_grad(params: TrajectoryParams, fld: VortexField, x: np.ndarray, factors: np.ndarray):
    """Per-sample objective ``(S,)`` and gradient ``(S, d)`` for multiplicative factors ``(S, 2)``."""
    X = params.waypoints(x)
    step = X[:, 1:] - X[:, :-1]  # (N, T, 2)
    v, J = velocity_and_jacobian(fld, X[:, :-1])  # (N, T, 2), (N, T, 2, 2)
    dt = params.delta_t
    r = step[None] - dt * factors[:, None, None, :] * v[None]  # (S, N, T, 2)
    f = np.einsum("snti,snti->s", r, r) / params.N
    gX = np.zeros((factors.shape[0],) + X.shape)
    gX[:, :, 1:] += 2.0 * r / params.N
    weighted = factors[:, None, None, :] * r  # diag(1+e) r
    JTr = np.einsum("ntij,snti->sntj", J, weighted)
    gX[:, :, :-1] -= 2.0 * (r + dt * JTr) / params.N
    return f, gX[:, :, 1:].reshape(factors.shape[0], -1)


def _speed_constraints(params: TrajectoryParams):
    N, T = params.N, params.T_wp
    d = params.d
    cap2 = params.step_cap**2

    def evaluate(x: np.ndarray):
        X = params.waypoints(x)
        step = X[:, 1:] - X[:, :-1]  # (N, T, 2)
        values = np.einsum("nti,nti->nt", step, step).reshape(-1) - cap2
        jac = np.zeros((N, T, N, T, 2))
        for j in range(N):
            for tau in range(T):
                jac[j, tau, j, tau] = 2.0 * step[j, tau]
                if tau > 0:
                    jac[j, tau, j, tau - 1] = -2.0 * step[j, tau]
        return values, jac.reshape(N * T, d)

    return evaluate


def _equalities(params: TrajectoryParams) -> tuple[np.ndarray, np.ndarray]:
    N, T, d = params.N, params.T_wp, params.d

    def idx(j, tau, c):
        return (j * T + tau - 1) * 2 + c

    rows, rhs = [], []
    for j in range(N):
        for c in range(2):
            row = np.zeros(d)
            row[idx(j, T, c)] = 1.0
            rows.append(row)
            rhs.append(params.goals[j, c])
    F = params.formation
    for tau in range(1, T):
        for frow in F:
            row = np.zeros(d)
            for j in range(N):
                for c in range(2):
                    row[idx(j, tau, c)] = frow[2 * j + c]
            rows.append(row)
            rhs.append(0.0)
    return np.array(rows), np.array(rhs)


def make_trajectory_problem(
    params: TrajectoryParams,
    n: int,
    gamma: float = 10.0,
    mc_seed: int = 0,
) -> ProblemSpec:
    """Formation trajectory problem shared by ``n`` forecast-subscribing agents."""
    F = params.formation
    if F.shape[0]:
        for name, pts in (("start", params.starts), ("goal", params.goals)):
            residual = np.max(np.abs(F @ pts.reshape(-1)))
            if residual > 1e-9:
                raise InfeasibleFormation(f"{name} positions violate the formation by {residual:.3e}")
        if np.linalg.matrix_rank(F) < F.shape[0]:
            raise InvalidProblem("formation matrix must have full row rank")

    fields = [params.agent_field(i) for i in range(n)]
    budget = int(params.mc_budget)
    mc_factors = [
        np.array([params.noise_factor(i, derive_key(mc_seed, _MC_TAG, s)) for s in range(budget)])
        for i in range(n)
    ]

    def grad_oracle(i: int, x: np.ndarray, key: int) -> np.ndarray:
        factor = params.noise_factor(i, key)[None]
        return _objective_and_grad(params, fields[i], x, factor)[1][0]

    def mc_mean_grad(i: int, x: np.ndarray) -> np.ndarray:
        return _objective_and_grad(params, fields[i], x, mc_factors[i])[1].mean(axis=0)

    def mean_objective(i: int, x: np.ndarray) -> float:
        return float(_objective_and_grad(params, fields[i], x, mc_factors[i])[0].mean())

    def sample_objective(i: int, x: np.ndarray, key: int) -> float:
        factor = params.noise_factor(i, key)[None]
        return float(_objective_and_grad(params, fields[i], x, factor)[0][0])

    A_eq, b_eq = _equalities(params)
    problem = ProblemSpec(
        name="trajectory",
        d=params.d,
        n=n,
        m=params.N * params.T_wp,
        grad_oracle=grad_oracle,
        constraint_eval=_speed_constraints(params),
        gamma=gamma,
        sigma_bar_sq=params.noise_sigma**2,
        mc_mean_grad=mc_mean_grad,
        mc_budget=budget,
        mean_objective=mean_objective,
        A_eq=A_eq,
        b_eq=b_eq,
        meta={
            "params": params,
            "sample_objective": sample_objective,
            "fields": fields,
            "violation": lambda x: trajectory_violation(x, params),
        },
    )
    from ..metrics import estimate_smoothness

    x0 = params.straight_line()
    margin = max(params.step_cap, 1.0)
    box = np.stack([x0 - margin, x0 + margin], axis=1)
    L = estimate_smoothness(problem, box, grid_points=4)
    return replace(problem, L=L)


def trajectory_violation(x: np.ndarray, params: TrajectoryParams) -> float:
    """Summed norm-form speed violation ``sum max(0, |step| - v_max dt)``."""
    X = params.waypoints(x)
    norms = np.linalg.norm(X[:, 1:] - X[:, :-1], axis=-1)
    return float(np.sum(np.maximum(0.0, norms - params.step_cap)))


def box_formation(N: int) -> np.ndarray:
    """Homogeneous formation rows: side-by-side pair (N=2) or axis-aligned rectangle (N=4)."""
    if N == 1:
        return np.zeros((0, 2))
    if N == 2:
        return np.array([[1.0, 0.0, -1.0, 0.0]])
    if N == 4:
        # corners ordered (0,0), (s,0), (s,s), (0,s)
        return np.array(
            [
                [1, 0, -1, 0, 1, 0, -1, 0],
                [0, 1, 0, -1, 0, 1, 0, -1],
                [0, 1, 0, -1, 0, 0, 0, 0],
                [1, 0, 0, 0, 0, 0, -1, 0],
            ],
            dtype=float,
        )
    raise ValueError("built-in formations exist for N in {1, 2, 4}")


def desk_scale_params(**overrides) -> TrajectoryParams:
    base = dict(
        N=2,
        T_wp=10,
        T_f=300.0,
        starts=np.array([[10.0, 90.0], [10.0, 110.0]]),
        goals=np.array([[190.0, 90.0], [190.0, 110.0]]),
        formation=box_formation(2),
        v_max=1.0,
        base_field=PAPER_VORTICES,
    )
    base.update(overrides)
    return TrajectoryParams(**base)


def paper_scale_params(**overrides) -> TrajectoryParams:
    base = dict(
        N=4,
        T_wp=20,
        T_f=600.0,
        starts=np.array([[10.0, 90.0], [30.0, 90.0], [30.0, 110.0], [10.0, 110.0]]),
        goals=np.array([[170.0, 90.0], [190.0, 90.0], [190.0, 110.0], [170.0, 110.0]]),
        formation=box_formation(4),
        v_max=1.0,
        base_field=PAPER_VORTICES,
    )
    base.update(overrides)
    return TrajectoryParams(**base)
