"""Barrier and Lyapunov machinery shared by both training stages.

A barrier function h defines the safe set {s : h(s) >= 0}.  A transition
s -> s_next keeps the one-step safety condition when

    h(s_next) + (alpha0 - 1) * h(s) >= 0,   0 < alpha0 < 1,

i.e. h may decay by at most a factor (1 - alpha0) per step.  Once that
condition holds along a whole trajectory starting inside the safe set, the
trajectory never leaves it (forward invariance): h(s_t+1) >= (1-alpha0) h(s_t)
>= 0 by induction.

The stage-1 reward is exp(margin) of the clipped condition residual, which
lives in (0, 1] and is exactly 1 on condition-satisfying steps.  The stage-2
reward penalises failures of the analogous decay condition on a Lyapunov
(goal-distance) function and is always <= 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

# exp(-50) ~ 2e-22 is far below any meaningful reward resolution, but clamping
# before exponentiation keeps the reward strictly positive in float64 even for
# arbitrarily deep violations.
MARGIN_CLAMP = -50.0

StateFunction = Callable[[np.ndarray], float]


def _as_state(s, dim: int | None) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1:
        raise ValueError(f"state must be a 1-d vector, got shape {s.shape}")
    if dim is not None and s.shape[0] != dim:
        raise ValueError(f"state has dimension {s.shape[0]}, expected {dim}")
    return s


@dataclass(frozen=True)
class BarrierSpec:
    """A scalar state function h with per-step decay rate alpha0.

    ``state_dim`` is optional; when given, inputs are validated against it.
    """

    h: StateFunction
    alpha0: float
    state_dim: int | None = None

    def __post_init__(self):
        if not 0.0 < self.alpha0 < 1.0:
            raise ValueError(f"alpha0 must lie in (0, 1), got {self.alpha0}")

    def value(self, s) -> float:
        v = float(self.h(_as_state(s, self.state_dim)))
        if not math.isfinite(v):
            raise ValueError(f"barrier value is not finite: {v}")
        return v


@dataclass(frozen=True)
class LyapunovSpec:
    """A nonnegative goal-distance function l with decay rate beta0.

    l is zero exactly at the goal; the stage-2 reward asks l to shrink by at
    least a factor (1 - beta0) per step.
    """

    l: StateFunction
    beta0: float
    state_dim: int | None = None

    def __post_init__(self):
        if not 0.0 < self.beta0 < 1.0:
            raise ValueError(f"beta0 must lie in (0, 1), got {self.beta0}")

    def value(self, s) -> float:
        v = float(self.l(_as_state(s, self.state_dim)))
        if not math.isfinite(v) or v < 0.0:
            raise ValueError(f"Lyapunov value must be finite and >= 0, got {v}")
        return v


@dataclass(frozen=True)
class SafetyMargin:
    """Clipped residual of the one-step safety condition; always <= 0.

    Zero exactly when the condition holds, so the margin doubles as a
    per-step safety certificate.
    """

    value: float

    def __post_init__(self):
        if not (math.isfinite(self.value) and self.value <= 0.0):
            raise ValueError(f"safety margin must be finite and <= 0, got {self.value}")

    @property
    def holds(self) -> bool:
        return self.value == 0.0


def is_safe_state(spec: BarrierSpec, s) -> bool:
    """True when s lies in the safe set of the barrier, i.e. h(s) >= 0."""
    return spec.value(s) >= 0.0


def safety_margin(spec: BarrierSpec, s, s_next) -> SafetyMargin:
    """min(h(s_next) + (alpha0 - 1) h(s), 0): the per-step safety certificate."""
    residual = spec.value(s_next) + (spec.alpha0 - 1.0) * spec.value(s)
    return SafetyMargin(min(residual, 0.0))


def reward_safety_exp(margin: SafetyMargin) -> float:
    """exp(margin), in (0, 1]; exactly 1 iff the safety condition held."""
    return math.exp(max(margin.value, MARGIN_CLAMP))


def reward_safety_composite(specs: Sequence[BarrierSpec], s, s_next) -> float:
    """Mean of exp(margin) over several barriers; still in (0, 1]."""
    if not specs:
        raise ValueError("need at least one barrier")
    return float(
        np.mean([reward_safety_exp(safety_margin(spec, s, s_next)) for spec in specs])
    )


def reward_goal_clf(spec: LyapunovSpec, s, s_next) -> float:
    """-max(l(s_next) + (beta0 - 1) l(s), 0): zero iff l decayed fast enough."""
    residual = spec.value(s_next) + (spec.beta0 - 1.0) * spec.value(s)
    return -max(residual, 0.0)


def safe_return_upper_bound(gamma: float, k_max: int) -> float:
    """Largest possible discounted sum of k_max rewards each in (0, 1].

    Equals sum_{k<k_max} gamma^k = (1 - gamma^k_max) / (1 - gamma).  An
    episode attains it iff every step earned the maximal reward 1, i.e. every
    step satisfied the safety condition, which makes the bound a certification
    threshold for critics trained on the exponential safety reward.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    if k_max < 1:
        raise ValueError(f"k_max must be >= 1, got {k_max}")
    return (1.0 - gamma**k_max) / (1.0 - gamma)
