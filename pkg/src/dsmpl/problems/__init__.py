"""Benchmark problems: the constrained quartic and formation trajectory planning."""

from .base import InvalidProblem, L1Regularizer, MeanGradUnavailable, ProblemSpec
from .quartic import FEASIBLE_INTERVAL, QuarticParams, distance_to_feasible, make_quartic_problem, quartic_constraints
from .trajectory import (
    InfeasibleFormation,
    TrajectoryParams,
    box_formation,
    desk_scale_params,
    make_trajectory_problem,
    paper_scale_params,
    sample_forecast,
    trajectory_violation,
)
from .vortex import VortexField, velocity_and_jacobian, vortex_velocity

__all__ = [
    "FEASIBLE_INTERVAL",
    "InfeasibleFormation",
    "InvalidProblem",
    "L1Regularizer",
    "MeanGradUnavailable",
    "ProblemSpec",
    "QuarticParams",
    "TrajectoryParams",
    "VortexField",
    "box_formation",
    "desk_scale_params",
    "distance_to_feasible",
    "make_quartic_problem",
    "make_trajectory_problem",
    "paper_scale_params",
    "quartic_constraints",
    "sample_forecast",
    "trajectory_violation",
    "velocity_and_jacobian",
    "vortex_velocity",
]
