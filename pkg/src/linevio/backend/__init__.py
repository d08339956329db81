"""Batch nonlinear-least-squares back-end over event-line, line-extremity,
inertial, and bias-walk residuals."""

from .problem import (
    Association,
    AssociationBlock,
    NavStateNode,
    Problem,
    ResidualWeights,
    initialize_line,
)
from .residuals import (
    residual_attraction,
    residual_bias,
    residual_event_to_line,
    residual_imu,
    residual_repulsion,
)
from .solver import (
    ConvergenceReport,
    SolveSchedule,
    SolverOptions,
    dense_normal_equations,
    solve,
)

__all__ = [
    "Association",
    "AssociationBlock",
    "NavStateNode",
    "Problem",
    "ResidualWeights",
    "initialize_line",
    "residual_attraction",
    "residual_bias",
    "residual_event_to_line",
    "residual_imu",
    "residual_repulsion",
    "ConvergenceReport",
    "SolveSchedule",
    "SolverOptions",
    "dense_normal_equations",
    "solve",
]
