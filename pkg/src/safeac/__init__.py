"""safeac: safe actor-critic training with barrier-derived rewards.

A barrier function turns one-step safety into a reward whose critic doubles
as a quantitative safety certificate; a second training stage then improves
goal-reaching along gradient directions restricted to never degrade the
safety objective to first order.
"""

__version__ = "0.1.0"

from .barriers import (
    BarrierSpec,
    LyapunovSpec,
    SafetyMargin,
    is_safe_state,
    safety_margin,
    reward_safety_exp,
    reward_safety_composite,
    reward_goal_clf,
    safe_return_upper_bound,
)
from .nets import MlpSpec, ParamVector, init_params, forward, backward, Adam
from .engine import (
    Transition,
    ReplayBuffer,
    GaussianPolicy,
    critic_target,
    critic_loss_grad,
    actor_loss_grad,
    soft_update,
)
from .projection import MarginMode, InfeasibleMarginError, solve_restricted, solve_with_margin

__all__ = [
    "BarrierSpec",
    "LyapunovSpec",
    "SafetyMargin",
    "is_safe_state",
    "safety_margin",
    "reward_safety_exp",
    "reward_safety_composite",
    "reward_goal_clf",
    "safe_return_upper_bound",
    "MlpSpec",
    "ParamVector",
    "init_params",
    "forward",
    "backward",
    "Adam",
    "Transition",
    "ReplayBuffer",
    "GaussianPolicy",
    "critic_target",
    "critic_loss_grad",
    "actor_loss_grad",
    "soft_update",
    "MarginMode",
    "InfeasibleMarginError",
    "solve_restricted",
    "solve_with_margin",
]
