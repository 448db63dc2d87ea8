"""Problem abstraction: per-agent stochastic oracles plus deterministic constraints."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

GradOracle = Callable[[int, np.ndarray, int], np.ndarray]
MeanFn = Callable[[int, np.ndarray], np.ndarray]
ConstraintEval = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


class MeanGradUnavailable(RuntimeError):
    pass


class InvalidProblem(ValueError):
    pass


@dataclass(frozen=True)
class L1Regularizer:
    """``h(x) = sum_j w_j |x_j|`` with nonnegative weights."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0):
            raise InvalidProblem("l1 weights must be nonnegative")
        object.__setattr__(self, "weights", w)

    def __call__(self, x: np.ndarray) -> float:
        return float(self.weights @ np.abs(x))


@dataclass(frozen=True)
class ProblemSpec:
    """Decentralized constrained stochastic problem.

    ``grad_oracle(i, x, key)`` is agent ``i``'s stochastic gradient for the
    sample addressed by ``key``; it must be a pure function of its arguments.
    ``constraint_eval(x)`` returns ``(g(x), jac)`` with ``jac`` of shape
    ``(m, d)``. Linear equalities ``A_eq x = b_eq`` are kept exactly in every
    subproblem. Exactly one of ``mean_grad`` / ``mc_mean_grad`` is normally
    set; the Monte-Carlo version records its sample budget in ``mc_budget``.
    """

    name: str
    d: int
    n: int
    m: int
    grad_oracle: GradOracle
    constraint_eval: ConstraintEval
    gamma: float
    sigma_bar_sq: float
    L: float = 1.0
    mean_grad: MeanFn | None = None
    mean_objective: Callable[[int, np.ndarray], float] | None = None
    mc_mean_grad: MeanFn | None = None
    mc_budget: int | None = None
    regularizer: L1Regularizer | None = None
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.gamma < 0:
            raise InvalidProblem("penalty weight gamma must be nonnegative")
        if self.A_eq is not None:
            A = np.atleast_2d(np.asarray(self.A_eq, dtype=float))
            b = np.asarray(self.b_eq, dtype=float).reshape(-1)
            if A.shape != (b.size, self.d):
                raise InvalidProblem(f"A_eq shape {A.shape} inconsistent with b_eq ({b.size}) and d={self.d}")
            if np.linalg.matrix_rank(A) < A.shape[0]:
                raise InvalidProblem("A_eq must have full row rank")
            object.__setattr__(self, "A_eq", A)
            object.__setattr__(self, "b_eq", b)
        if self.regularizer is not None and self.regularizer.weights.shape != (self.d,):
            raise InvalidProblem("regularizer weights must have length d")

    def with_gamma(self, gamma: float) -> "ProblemSpec":
        from dataclasses import replace

        return replace(self, gamma=float(gamma))

    @property
    def has_equalities(self) -> bool:
        return self.A_eq is not None and self.A_eq.shape[0] > 0

    def h(self, x: np.ndarray) -> float:
        return 0.0 if self.regularizer is None else self.regularizer(x)

    def diagnostic_grad(self, i: int, x: np.ndarray) -> np.ndarray:
        """Exact mean gradient when available, else the Monte-Carlo estimate."""
        if self.mean_grad is not None:
            return self.mean_grad(i, x)
        if self.mc_mean_grad is not None:
            return self.mc_mean_grad(i, x)
        raise MeanGradUnavailable(f"problem {self.name!r} exposes no mean gradient")

    def objective(self, x: np.ndarray) -> float:
        """Global ``f(x) = (1/n) sum_i f_i(x)``."""
        if self.mean_objective is None:
            raise MeanGradUnavailable(f"problem {self.name!r} exposes no objective values")
        return float(np.mean([self.mean_objective(i, x) for i in range(self.n)]))

    def global_mean_grad(self, x: np.ndarray) -> np.ndarray:
        return np.mean([self.diagnostic_grad(i, x) for i in range(self.n)], axis=0)

    def equality_residual(self, x: np.ndarray) -> float:
        if not self.has_equalities:
            return 0.0
        return float(np.max(np.abs(self.A_eq @ x - self.b_eq)))
