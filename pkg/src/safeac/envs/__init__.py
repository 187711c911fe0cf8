"""Deterministic benchmark environments."""

from .cartpole import (
    ContinuousCartPole,
    CartPoleState,
    cartpole_step,
    cartpole_barrier_specs,
    cartpole_lyapunov_spec,
)
from .navigation import (
    NavigationEnv,
    NavState,
    LayoutSamplingError,
    raycast,
    ray_distances,
    sample_layout,
    connectivity_check,
    nav_barrier_spec,
    nav_lyapunov_spec,
    nav_barrier_value,
    nav_lyapunov_value,
    normalize_features,
    layout_record,
    layout_to_json,
)

__all__ = [
    "ContinuousCartPole",
    "CartPoleState",
    "cartpole_step",
    "cartpole_barrier_specs",
    "cartpole_lyapunov_spec",
    "NavigationEnv",
    "NavState",
    "LayoutSamplingError",
    "raycast",
    "ray_distances",
    "sample_layout",
    "connectivity_check",
    "nav_barrier_spec",
    "nav_lyapunov_spec",
    "nav_barrier_value",
    "nav_lyapunov_value",
    "normalize_features",
    "layout_record",
    "layout_to_json",
]
