"""2-D pool navigation with a forward-facing rangefinder.

A unicycle vehicle moves at a fixed 0.9 m/s forward speed inside a
10 m x 10 m pool scattered with 9 axis-aligned square obstacles; the only
control is the yaw rate in [-1, 1] rad/s.  A 9-ray rangefinder spans a 120
degree field of view at 15 degree spacing, each ray capped at 10 m.

Episodes start at one of the four pool corners with the goal drawn in the
diagonally opposite half; layouts are rejected until a flood fill on a
0.25 m grid confirms a collision-free corridor from start to goal.

The safety barrier is 5 * (min_i d_i^2 - 1) over the ray distances (1 m
clearance threshold), and the goal function is squared distance to the
target.  Both are evaluated on the raw feature vector, the unnormalised
counterpart of the policy observation.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from ..barriers import BarrierSpec, LyapunovSpec

POOL_SIZE = 10.0
FORWARD_SPEED = 0.9
DT = 0.05
N_RAYS = 9
RAY_MAX = 10.0
FOV_DEG = 120.0
SUCCESS_DISTANCE = 1.5
ROBOT_RADIUS = 0.3
N_OBSTACLES = 9
OBSTACLE_HALF_WIDTH = 0.6
CLEAR_DISC_RADIUS = 1.5
CORNER_INSET = 1.0
GRID_RESOLUTION = 0.25
DEFAULT_MAX_STEPS = 1000
PLACEMENT_RETRY_LIMIT = 1000

BARRIER_SCALE = 5.0
CLEARANCE_THRESHOLD = 1.0

# Ray bearings relative to heading: -60 .. +60 degrees at 15 degree spacing.
RAY_OFFSETS = np.radians(np.linspace(-FOV_DEG / 2.0, FOV_DEG / 2.0, N_RAYS))

OBSERVATION_DIM = 17

_CORNERS = (
    (CORNER_INSET, CORNER_INSET),
    (CORNER_INSET, POOL_SIZE - CORNER_INSET),
    (POOL_SIZE - CORNER_INSET, CORNER_INSET),
    (POOL_SIZE - CORNER_INSET, POOL_SIZE - CORNER_INSET),
)


class LayoutSamplingError(RuntimeError):
    """Obstacle placement failed too many times; re-seed and retry."""


@dataclass
class NavState:
    x: float
    y: float
    gamma: float
    v_x: float
    v_y: float
    omega_gamma: float
    goal: tuple[float, float]
    obstacles: np.ndarray  # (N, 3) rows of (cx, cy, half_width)


def _wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def raycast(pos, heading: float, obstacles, pool_size: float = POOL_SIZE, max_range: float = RAY_MAX) -> float:
    """Distance along the ray to the nearest obstacle edge or pool wall."""
    return float(
        ray_distances(np.asarray(pos, float), np.array([heading]), np.asarray(obstacles, float), pool_size, max_range)[0]
    )


def ray_distances(pos: np.ndarray, headings: np.ndarray, obstacles: np.ndarray, pool_size: float = POOL_SIZE, max_range: float = RAY_MAX) -> np.ndarray:
    """Vectorised raycast over several headings from one position."""
    px, py = float(pos[0]), float(pos[1])
    dx = np.cos(headings)
    dy = np.sin(headings)
    t_best = np.full(headings.shape, max_range)

    # Pool walls: planes x=0, x=W, y=0, y=W.
    with np.errstate(divide="ignore", invalid="ignore"):
        for p, d in ((px, dx), (py, dy)):
            t_lo = np.where(d < 0.0, (0.0 - p) / d, np.inf)
            t_hi = np.where(d > 0.0, (pool_size - p) / d, np.inf)
            t_best = np.minimum(t_best, np.minimum(t_lo, t_hi))

        if len(obstacles):
            cx = obstacles[:, 0][None, :]
            cy = obstacles[:, 1][None, :]
            hw = obstacles[:, 2][None, :]
            dxe = np.where(dx == 0.0, 1e-300, dx)[:, None]
            dye = np.where(dy == 0.0, 1e-300, dy)[:, None]
            tx1 = (cx - hw - px) / dxe
            tx2 = (cx + hw - px) / dxe
            ty1 = (cy - hw - py) / dye
            ty2 = (cy + hw - py) / dye
            t_near = np.maximum(np.minimum(tx1, tx2), np.minimum(ty1, ty2))
            t_far = np.minimum(np.maximum(tx1, tx2), np.maximum(ty1, ty2))
            hit = (t_near <= t_far) & (t_far >= 0.0)
            t_hit = np.where(hit, np.maximum(t_near, 0.0), np.inf)
            t_best = np.minimum(t_best, t_hit.min(axis=1))

    return np.minimum(t_best, max_range)


def box_clearance(pos, obstacles: np.ndarray) -> float:
    """Euclidean distance from a point to the nearest obstacle boundary
    (zero inside a box)."""
    if not len(obstacles):
        return math.inf
    dx = np.maximum(np.abs(pos[0] - obstacles[:, 0]) - obstacles[:, 2], 0.0)
    dy = np.maximum(np.abs(pos[1] - obstacles[:, 1]) - obstacles[:, 2], 0.0)
    return float(np.min(np.hypot(dx, dy)))


def wall_clearance(pos, pool_size: float = POOL_SIZE) -> float:
    return float(min(pos[0], pool_size - pos[0], pos[1], pool_size - pos[1]))


def ray_fan(state: NavState) -> np.ndarray:
    return ray_distances(
        np.array([state.x, state.y]), state.gamma + RAY_OFFSETS, state.obstacles
    )


def connectivity_check(start, goal, obstacles: np.ndarray, resolution: float = GRID_RESOLUTION) -> bool:
    """Flood fill on a coarse grid of robot-radius-inflated free space.

    True when a collision-free corridor joins the cells containing start and
    goal.  Used both to accept sampled layouts and as an independent oracle
    in the tests.
    """
    n = int(round(POOL_SIZE / resolution))
    xs = (np.arange(n) + 0.5) * resolution
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    free = (
        (gx > ROBOT_RADIUS)
        & (gx < POOL_SIZE - ROBOT_RADIUS)
        & (gy > ROBOT_RADIUS)
        & (gy < POOL_SIZE - ROBOT_RADIUS)
    )
    for cx, cy, hw in obstacles:
        blocked = (np.abs(gx - cx) <= hw + ROBOT_RADIUS) & (np.abs(gy - cy) <= hw + ROBOT_RADIUS)
        free &= ~blocked

    def cell(p):
        return (
            min(max(int(p[0] / resolution), 0), n - 1),
            min(max(int(p[1] / resolution), 0), n - 1),
        )

    start_c, goal_c = cell(start), cell(goal)
    if not (free[start_c] and free[goal_c]):
        return False
    seen = np.zeros_like(free)
    seen[start_c] = True
    queue = deque([start_c])
    while queue:
        i, j = queue.popleft()
        if (i, j) == goal_c:
            return True
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ni, nj = i + di, j + dj
            if 0 <= ni < n and 0 <= nj < n and free[ni, nj] and not seen[ni, nj]:
                seen[ni, nj] = True
                queue.append((ni, nj))
    return False


def _goal_in_diagonal_half(corner, rng: np.random.Generator) -> tuple[float, float]:
    """Goal uniform in the pool half diagonally opposite the start corner."""
    low_x = corner[0] < POOL_SIZE / 2.0
    low_y = corner[1] < POOL_SIZE / 2.0
    while True:
        x = rng.uniform(CORNER_INSET, POOL_SIZE - CORNER_INSET)
        y = rng.uniform(CORNER_INSET, POOL_SIZE - CORNER_INSET)
        if low_x and low_y and x + y > POOL_SIZE:
            return x, y
        if (not low_x) and (not low_y) and x + y < POOL_SIZE:
            return x, y
        if low_x and (not low_y) and x > y:
            return x, y
        if (not low_x) and low_y and x < y:
            return x, y


def sample_layout(rng: np.random.Generator):
    """Draw (start, goal, obstacles) satisfying clearance and connectivity."""
    corner = _CORNERS[int(rng.integers(len(_CORNERS)))]
    start = np.array(corner)
    for _ in range(PLACEMENT_RETRY_LIMIT):
        goal = np.array(_goal_in_diagonal_half(corner, rng))
        lo = OBSTACLE_HALF_WIDTH
        hi = POOL_SIZE - OBSTACLE_HALF_WIDTH
        centers = rng.uniform(lo, hi, size=(N_OBSTACLES, 2))
        obstacles = np.column_stack([centers, np.full(N_OBSTACLES, OBSTACLE_HALF_WIDTH)])
        clear = box_clearance(start, obstacles) > CLEAR_DISC_RADIUS and (
            box_clearance(goal, obstacles) > CLEAR_DISC_RADIUS
        )
        if clear and connectivity_check(start, goal, obstacles):
            return start, goal, obstacles
    raise LayoutSamplingError(
        f"no feasible layout after {PLACEMENT_RETRY_LIMIT} attempts; re-seed"
    )


class NavigationEnv:
    """Episode wrapper around the pool task.

    ``step`` returns (obs, done, info); done marks collision or success
    (both true terminals), info["truncated"] marks the step cap, and
    info["outcome"] is one of running/success/collision/timeout.
    """

    observation_dim = OBSERVATION_DIM
    action_dim = 1
    action_low = np.array([-1.0])
    action_high = np.array([1.0])

    def __init__(self, max_steps: int = DEFAULT_MAX_STEPS, dt: float = DT):
        self.max_steps = max_steps
        self.dt = dt
        self.state: NavState | None = None
        self.steps = 0
        self._rays = np.full(N_RAYS, RAY_MAX)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        start, goal, obstacles = sample_layout(rng)
        gamma = math.atan2(POOL_SIZE / 2.0 - start[1], POOL_SIZE / 2.0 - start[0])
        self.state = NavState(
            x=float(start[0]),
            y=float(start[1]),
            gamma=gamma,
            v_x=FORWARD_SPEED * math.cos(gamma),
            v_y=FORWARD_SPEED * math.sin(gamma),
            omega_gamma=0.0,
            goal=(float(goal[0]), float(goal[1])),
            obstacles=obstacles,
        )
        self.steps = 0
        self._rays = ray_fan(self.state)
        return self.observe()

    def step(self, action):
        if self.state is None:
            raise RuntimeError("reset() must be called before step()")
        a = float(np.ravel(action)[0])
        clamped = not -1.0 <= a <= 1.0
        if clamped:
            a = min(max(a, -1.0), 1.0)
        s = self.state
        gamma = _wrap_angle(s.gamma + a * self.dt)
        x = s.x + FORWARD_SPEED * self.dt * math.cos(gamma)
        y = s.y + FORWARD_SPEED * self.dt * math.sin(gamma)
        self.state = NavState(
            x=x,
            y=y,
            gamma=gamma,
            v_x=FORWARD_SPEED * math.cos(gamma),
            v_y=FORWARD_SPEED * math.sin(gamma),
            omega_gamma=a,
            goal=s.goal,
            obstacles=s.obstacles,
        )
        self.steps += 1
        self._rays = ray_fan(self.state)

        pos = (x, y)
        collision = (
            float(self._rays.min()) < ROBOT_RADIUS
            or box_clearance(pos, s.obstacles) < ROBOT_RADIUS
            or wall_clearance(pos) < ROBOT_RADIUS
        )
        dist_goal = math.hypot(x - s.goal[0], y - s.goal[1])
        success = (not collision) and dist_goal < SUCCESS_DISTANCE
        done = collision or success
        truncated = (not done) and self.steps >= self.max_steps
        outcome = (
            "collision" if collision else "success" if success else "timeout" if truncated else "running"
        )
        info = {
            "action_clamped": clamped,
            "truncated": truncated,
            "outcome": outcome,
            "distance_to_goal": dist_goal,
        }
        return self.observe(), done, info

    def features(self) -> np.ndarray:
        """Raw feature vector: [d_1..d_9 (m), yaw rate, v_x, v_y, x, y,
        yaw, x_tar, y_tar] in physical units."""
        s = self.state
        return np.concatenate(
            [
                self._rays,
                [s.omega_gamma, s.v_x, s.v_y, s.x, s.y, s.gamma, s.goal[0], s.goal[1]],
            ]
        )

    def observe(self) -> np.ndarray:
        """Feature vector normalised entrywise into [-1, 1] by fixed ranges:
        distances /10, positions mapped from [0, 10], angles /pi,
        velocities and yaw rate taken as-is (already within +-1)."""
        return normalize_features(self.features())


def normalize_features(raw: np.ndarray) -> np.ndarray:
    obs = np.empty(OBSERVATION_DIM)
    obs[0:9] = raw[0:9] / RAY_MAX
    obs[9] = raw[9]
    obs[10] = raw[10]
    obs[11] = raw[11]
    obs[12] = raw[12] / POOL_SIZE * 2.0 - 1.0
    obs[13] = raw[13] / POOL_SIZE * 2.0 - 1.0
    obs[14] = raw[14] / math.pi
    obs[15] = raw[15] / POOL_SIZE * 2.0 - 1.0
    obs[16] = raw[16] / POOL_SIZE * 2.0 - 1.0
    return np.clip(obs, -1.0, 1.0)


def nav_barrier_value(state: NavState) -> float:
    """Barrier 5 (min_i d_i^2 - 1) recomputed from the state's rays."""
    rays = ray_fan(state)
    return BARRIER_SCALE * (float(np.min(rays)) ** 2 - CLEARANCE_THRESHOLD**2)


def nav_lyapunov_value(state: NavState) -> float:
    return (state.x - state.goal[0]) ** 2 + (state.y - state.goal[1]) ** 2


def nav_barrier_spec(alpha0: float = 0.1) -> BarrierSpec:
    """Barrier over the raw feature vector (rays in meters)."""

    def h(f: np.ndarray) -> float:
        return BARRIER_SCALE * (float(np.min(f[0:9])) ** 2 - CLEARANCE_THRESHOLD**2)

    return BarrierSpec(h=h, alpha0=alpha0, state_dim=OBSERVATION_DIM)


def nav_lyapunov_spec(beta0: float = 0.05) -> LyapunovSpec:
    """Squared goal distance over the raw feature vector."""

    def l(f: np.ndarray) -> float:
        return (f[12] - f[15]) ** 2 + (f[13] - f[16]) ** 2

    return LyapunovSpec(l=l, beta0=beta0, state_dim=OBSERVATION_DIM)


def layout_record(state: NavState) -> dict:
    """Episode geometry as a plain structure for export/replotting."""
    return {
        "start": [state.x, state.y],
        "goal": list(state.goal),
        "obstacles": [
            {"cx": float(cx), "cy": float(cy), "half_width": float(hw)}
            for cx, cy, hw in state.obstacles
        ],
        "pool_size": POOL_SIZE,
    }


def layout_to_json(state: NavState) -> str:
    return json.dumps(layout_record(state), sort_keys=True)
