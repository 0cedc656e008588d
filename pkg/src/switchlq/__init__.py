"""Linear-quadratic control of linear SDEs under marked-point-process regime switching.

The Riccati backward equation is solved in regime-field form ``P_t = p(t, e_t, I_t)``
on a (time x elapsed-time x mark) grid; Monte-Carlo tools check the resulting
value function and feedback law against simulated costs.
"""

__version__ = "0.1.0"

from .exceptions import (  # noqa: E402
    BoundError,
    ConfigError,
    ConvergenceError,
    GridError,
    ModelError,
    PositivityError,
    SimulationError,
    StabilityError,
    SwitchLQError,
)
from .lq import estimate_cost, fundamental_relation_residual, optimality_experiment, value  # noqa: E402
from .lyapunov import LyapunovProblem, solve_lyapunov  # noqa: E402
from .mpp import SwitchingLaw, TransitionKernel, compensator_check, simulate_switching  # noqa: E402
from .regime_field import CoefficientSet, Grid, RegimeField, field_distance, psd_floor  # noqa: E402
from .riccati import solve_riccati, solve_riccati_direct, solve_riccati_picard  # noqa: E402

__all__ = [
    "BoundError", "ConfigError", "ConvergenceError", "GridError", "ModelError", "PositivityError",
    "SimulationError", "StabilityError", "SwitchLQError",
    "CoefficientSet", "Grid", "RegimeField", "field_distance", "psd_floor",
    "SwitchingLaw", "TransitionKernel", "compensator_check", "simulate_switching",
    "LyapunovProblem", "solve_lyapunov",
    "solve_riccati", "solve_riccati_direct", "solve_riccati_picard",
    "estimate_cost", "fundamental_relation_residual", "optimality_experiment", "value",
]
