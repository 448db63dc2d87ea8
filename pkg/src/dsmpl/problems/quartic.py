"""One-dimensional quartic benchmark with two quadratic constraints.

Each agent holds ``f_i(x) = s_i * prod_j (x - a_ij)`` with two root clusters
(a valley near -3 and one near 2). The constraints ``(x+4)^2 - 4 <= 0`` and
``(x+1.5)^2 - 0.36 <= 0`` leave the feasible interval ``[-2.1, -2]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .._keys import generator, stream
from .base import ProblemSpec

BASE_ROOTS = np.array([-3.5, -2.5, 1.5, 2.5])
ROOT_JITTER = 0.2
SMOOTHNESS_BOX = (-6.0, 4.0)
FEASIBLE_INTERVAL = (-2.1, -2.0)


@dataclass(frozen=True)
class QuarticParams:
    scales: np.ndarray  # (n,)
    roots: np.ndarray  # (n, 4)
    noise_std: float

    @classmethod
    def sample(cls, n: int, noise_std: float, seed: int) -> "QuarticParams":
        rng = generator(seed, 0x0A27)
        scales = rng.uniform(0.5, 1.5, size=n)
        roots = BASE_ROOTS + rng.uniform(-ROOT_JITTER, ROOT_JITTER, size=(n, 4))
        return cls(scales, np.sort(roots, axis=1), float(noise_std))

    def coefficients(self) -> np.ndarray:
        return np.array([s * np.poly(r) for s, r in zip(self.scales, self.roots)])


def _horner(coeffs: tuple, x: float) -> float:
    acc = 0.0
    for c in coeffs:
        acc = acc * x + c
    return acc


def quartic_constraints(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x0 = float(x[0])
    values = np.array([(x0 + 4.0) ** 2 - 4.0, (x0 + 1.5) ** 2 - 0.36])
    jac = np.array([[2.0 * (x0 + 4.0)], [2.0 * (x0 + 1.5)]])
    return values, jac


def make_quartic_problem(
    n: int,
    noise_std: float = 1.0,
    seed: int = 0,
    gamma: float = 2000.0,
    params: QuarticParams | None = None,
) -> ProblemSpec:
    """Build the quartic benchmark for ``n`` agents.

    The stochastic gradient adds ``N(0, noise_std^2)`` noise to ``f_i'(x)``;
    the noise is a pure function of ``(key, i)``.
    """
    if n < 1:
        raise ValueError("need at least one agent")
    if params is None:
        params = QuarticParams.sample(n, noise_std, seed)
    coeffs = [tuple(float(c) for c in row) for row in params.coefficients()]
    dcoeffs = [tuple(float(c) for c in np.polyder(row)) for row in params.coefficients()]
    std = params.noise_std

    def mean_objective(i: int, x: np.ndarray) -> float:
        return _horner(coeffs[i], float(x[0]))

    def mean_grad(i: int, x: np.ndarray) -> np.ndarray:
        return np.array([_horner(dcoeffs[i], float(x[0]))])

    def grad_oracle(i: int, x: np.ndarray, key: int) -> np.ndarray:
        g = _horner(dcoeffs[i], float(x[0]))
        if std > 0.0:
            g = g + std * stream(key, i).standard_normal()
        return np.array([g])

    problem = ProblemSpec(
        name="quartic",
        d=1,
        n=n,
        m=2,
        grad_oracle=grad_oracle,
        constraint_eval=quartic_constraints,
        gamma=gamma,
        sigma_bar_sq=std**2,
        mean_grad=mean_grad,
        mean_objective=mean_objective,
        meta={"params": params, "seed": seed},
    )
    from ..metrics import estimate_smoothness

    L = estimate_smoothness(problem, np.array([SMOOTHNESS_BOX]), grid_points=2001)
    from dataclasses import replace

    return replace(problem, L=L)


def distance_to_feasible(x: float) -> float:
    lo, hi = FEASIBLE_INTERVAL
    return max(lo - x, x - hi, 0.0)
