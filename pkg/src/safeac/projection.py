"""Exact solver for the restricted policy-update direction.

Given the safety ascent gradient g1 and the goal ascent gradient g2, the
update direction e solves

    max  e . g2
    s.t. e . g1 >= 0          (safety does not degrade to first order)
         ||e|| <= ||g2||      (step magnitude capped by the goal gradient)

which has a closed form in the 2-d span of {g1, g2}: keep g2 when it already
respects the constraint, otherwise project it onto the constraint boundary
and rescale back to ||g2||.  Margin variants tighten the halfspace to
e . g1 >= delta or cos(e, g1) >= delta to absorb gradient estimation noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Relative tolerance deciding the fully-conflicting (anti-parallel) branch.
# Floating-point residue must not be blown up into a large spurious direction.
_DEGENERATE_RTOL = 1e-12


class InfeasibleMarginError(ValueError):
    """The margin constraint cannot be met by any direction in the norm ball."""


@dataclass(frozen=True)
class MarginMode:
    """Constraint flavour: plain halfspace, dot margin, or cosine margin."""

    kind: str  # "none" | "dot" | "cosine"
    delta: float | None = None

    def __post_init__(self):
        if self.kind not in ("none", "dot", "cosine"):
            raise ValueError(f"unknown margin kind {self.kind!r}")
        if self.kind == "none":
            if self.delta is not None:
                raise ValueError("margin 'none' takes no delta")
        elif self.kind == "dot":
            if self.delta is None or self.delta <= 0.0:
                raise ValueError("dot margin needs delta > 0")
        else:  # cosine
            if self.delta is None or not 0.0 < self.delta < 1.0:
                raise ValueError("cosine margin needs delta in (0, 1)")


def _validate(g1, g2) -> tuple[np.ndarray, np.ndarray]:
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    if g1.shape != g2.shape or g1.ndim != 1:
        raise ValueError(f"gradients must be 1-d and same length: {g1.shape} vs {g2.shape}")
    if not (np.isfinite(g1).all() and np.isfinite(g2).all()):
        raise ValueError("gradients must be finite")
    return g1, g2


def solve_restricted(g1, g2) -> np.ndarray:
    """Closed-form optimum of the restricted update (no margin).

    Returns g2 when the constraint is inactive, the rescaled projection of g2
    onto the halfspace boundary when it conflicts with g1, and the zero vector
    when the gradients are exactly opposed (every feasible direction would be
    useless for the goal objective, and zero is the conservative choice).
    """
    g1, g2 = _validate(g1, g2)
    n1_sq = float(g1 @ g1)
    dot = float(g2 @ g1)
    if n1_sq == 0.0 or dot >= 0.0:
        return g2.copy()
    p = g2 - (dot / n1_sq) * g1
    n2 = float(np.linalg.norm(g2))
    np_ = float(np.linalg.norm(p))
    if np_ <= _DEGENERATE_RTOL * n2:
        return np.zeros_like(g2)
    return (n2 / np_) * p


def solve_with_margin(g1, g2, mode: MarginMode) -> np.ndarray:
    """Restricted update with a tightened safety constraint.

    dot mode enforces e . g1 >= delta and raises InfeasibleMarginError when
    delta exceeds ||g1|| ||g2|| (no direction in the ball can comply).  cosine
    mode enforces cos(e, g1) >= delta, which is scale-free and always feasible
    for g1 != 0; when even the best cone direction is useless for the goal
    objective the zero vector is returned, mirroring solve_restricted.

    A zero g1 carries no safety direction information: dot mode is then
    infeasible (a positive dot product with zero is impossible) while cosine
    mode degrades to the unconstrained optimum g2.
    """
    g1, g2 = _validate(g1, g2)
    if mode.kind == "none":
        return solve_restricted(g1, g2)

    n1 = float(np.linalg.norm(g1))
    n2 = float(np.linalg.norm(g2))
    dot = float(g2 @ g1)

    if mode.kind == "dot":
        delta = float(mode.delta)
        if delta > n1 * n2:
            raise InfeasibleMarginError(
                f"dot margin {delta} exceeds max achievable {n1 * n2}"
            )
        if dot >= delta:
            return g2.copy()
        # Optimum on the ball boundary in span{g1, g2}, at minimal feasible
        # alignment with g1 (closest feasible angle to g2).
        u1 = g1 / n1
        x_min = delta / n1
        w = g2 - (dot / n1) * u1
        wn = float(np.linalg.norm(w))
        if wn <= _DEGENERATE_RTOL * n2:
            # g2 (anti-)parallel to g1; feasibility check above guarantees
            # x_min <= n2, the objective is monotone along u1.
            return x_min * u1
        y = math.sqrt(max(n2 * n2 - x_min * x_min, 0.0))
        return x_min * u1 + (y / wn) * w

    # cosine mode
    delta = float(mode.delta)
    if n1 == 0.0:
        return g2.copy()
    if n2 == 0.0:
        return np.zeros_like(g2)
    if dot / (n1 * n2) >= delta:
        return g2.copy()
    u1 = g1 / n1
    w = g2 - (dot / n1) * u1
    wn = float(np.linalg.norm(w))
    if wn <= _DEGENERATE_RTOL * n2:
        # Anti-parallel: the whole cone points away from g2, skip the update.
        return np.zeros_like(g2)
    # Cone edge nearest to g2's direction.
    phi = math.acos(delta)
    direction = math.cos(phi) * u1 + (math.sin(phi) / wn) * w
    if float(direction @ g2) <= 0.0:
        return np.zeros_like(g2)
    return n2 * direction
