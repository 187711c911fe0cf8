"""Continuous-action cart-pole with the standard benchmark physics.

State is [x, v, theta, omega] (theta in radians).  A scalar action in
[-1, 1] scales a 10 N horizontal force.  The allowable region is
|x| <= 2.4 m and |theta| <= 12 degrees; leaving it ends the episode.
Barrier functions are normalised quadratics on x and theta, the goal
function is squared distance of the cart from a target position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..barriers import BarrierSpec, LyapunovSpec

GRAVITY = 9.8
CART_MASS = 1.0
POLE_MASS = 0.1
TOTAL_MASS = CART_MASS + POLE_MASS
POLE_HALF_LENGTH = 0.5
POLE_MASS_LENGTH = POLE_MASS * POLE_HALF_LENGTH
FORCE_SCALE = 10.0
DT = 0.02

X_LIMIT = 2.4
THETA_LIMIT_DEG = 12.0
THETA_LIMIT_RAD = math.radians(THETA_LIMIT_DEG)

# Declared state space (twice the allowable region, like the usual benchmark
# observation bounds); reset_to rejects states outside it.
X_SPACE = 2.0 * X_LIMIT
THETA_SPACE_RAD = 2.0 * THETA_LIMIT_RAD

DEFAULT_MAX_STEPS = 500


@dataclass
class CartPoleState:
    x: float
    v: float
    theta: float
    omega: float

    def vector(self) -> np.ndarray:
        return np.array([self.x, self.v, self.theta, self.omega])


def cartpole_step(state: CartPoleState, action: float, dt: float = DT):
    """One semi-implicit Euler step of the cart-pole dynamics.

    Returns (next_state, violation, info); violation is True when the next
    state leaves the allowable region.  Out-of-range actions are clamped and
    flagged in info.
    """
    a = float(action)
    clamped = not -1.0 <= a <= 1.0
    if clamped:
        a = min(max(a, -1.0), 1.0)
    force = FORCE_SCALE * a

    cos_t = math.cos(state.theta)
    sin_t = math.sin(state.theta)
    temp = (force + POLE_MASS_LENGTH * state.omega**2 * sin_t) / TOTAL_MASS
    theta_acc = (GRAVITY * sin_t - cos_t * temp) / (
        POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos_t**2 / TOTAL_MASS)
    )
    x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos_t / TOTAL_MASS

    v = state.v + dt * x_acc
    x = state.x + dt * v
    omega = state.omega + dt * theta_acc
    theta = state.theta + dt * omega

    nxt = CartPoleState(x, v, theta, omega)
    violation = abs(x) > X_LIMIT or abs(theta) > THETA_LIMIT_RAD
    return nxt, violation, {"action_clamped": clamped}


class ContinuousCartPole:
    """Episode wrapper: tracks the step count and termination kind.

    ``step`` returns (obs, done, info) where done marks a safety violation
    (a true terminal for bootstrapping) and info["truncated"] marks hitting
    the step limit.  Observations are the raw 4-entry state.
    """

    observation_dim = 4
    action_dim = 1
    action_low = np.array([-1.0])
    action_high = np.array([1.0])

    def __init__(self, max_steps: int = DEFAULT_MAX_STEPS, dt: float = DT):
        self.max_steps = max_steps
        self.dt = dt
        self.state = CartPoleState(0.0, 0.0, 0.0, 0.0)
        self.steps = 0

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        """Start anywhere in the allowable region with near-zero velocities."""
        x = rng.uniform(-X_LIMIT, X_LIMIT)
        theta = rng.uniform(-THETA_LIMIT_RAD, THETA_LIMIT_RAD)
        v, omega = rng.uniform(-0.05, 0.05, size=2)
        self.state = CartPoleState(x, v, theta, omega)
        self.steps = 0
        return self.observe()

    def reset_to(self, state_vector) -> np.ndarray:
        s = np.asarray(state_vector, dtype=np.float64)
        if s.shape != (4,) or not np.isfinite(s).all():
            raise ValueError(f"state must be 4 finite entries, got {s}")
        if abs(s[0]) > X_SPACE or abs(s[2]) > THETA_SPACE_RAD:
            raise ValueError(f"state {s} outside the declared state space")
        self.state = CartPoleState(*s)
        self.steps = 0
        return self.observe()

    def observe(self) -> np.ndarray:
        return self.state.vector()

    def features(self) -> np.ndarray:
        """Reward-feature vector; identical to the observation here."""
        return self.state.vector()

    def step(self, action):
        self.state, violation, info = cartpole_step(self.state, float(np.ravel(action)[0]), self.dt)
        self.steps += 1
        truncated = (not violation) and self.steps >= self.max_steps
        info["violation"] = violation
        info["truncated"] = truncated
        info["outcome"] = "violation" if violation else ("safe" if truncated else "running")
        return self.observe(), violation, info


def cartpole_barrier_specs(alpha0: float = 0.1) -> tuple[BarrierSpec, BarrierSpec]:
    """Normalised quadratic barriers on cart position and pole angle.

    h1 = (2.4^2 - x^2) / 2.4^2 and h2 = (12^2 - theta_deg^2) / 12^2, both 1 at
    the center and 0 on the allowable boundary.  The angle barrier is stated
    in degrees, matching the limit's units.
    """

    def h1(s: np.ndarray) -> float:
        return (X_LIMIT**2 - s[0] ** 2) / X_LIMIT**2

    def h2(s: np.ndarray) -> float:
        deg = math.degrees(s[2])
        return (THETA_LIMIT_DEG**2 - deg**2) / THETA_LIMIT_DEG**2

    return (
        BarrierSpec(h=h1, alpha0=alpha0, state_dim=4),
        BarrierSpec(h=h2, alpha0=alpha0, state_dim=4),
    )


def cartpole_lyapunov_spec(target_x: float = 2.0, beta0: float = 0.05) -> LyapunovSpec:
    """Squared cart distance from the target position."""

    def l(s: np.ndarray) -> float:
        return (s[0] - target_x) ** 2

    return LyapunovSpec(l=l, beta0=beta0, state_dim=4)
