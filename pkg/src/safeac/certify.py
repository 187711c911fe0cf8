"""Safety-certificate analysis tools.

Trained-model side: critic-value heatmaps over a 2-d state grid, empirical
safe-rate maps from rollouts, rank-correlation consistency between them, and
critic-value slices across the action axis.

Exact side: a tabular oracle that verifies the certificate property on small
deterministic MDPs, where "value zero inside the safe set implies the rollout
never leaves it" can be checked with no approximation at all (the raw clipped
margin reward is used here, so safety corresponds to an exact value of zero).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .barriers import reward_safety_composite, safe_return_upper_bound
from .engine import q_values
from .seeding import substream_seed
from .trainer import PolicyCheckpoint, make_env, reward_specs


class DegenerateMapError(ValueError):
    """Constant maps have no defined rank correlation."""


@dataclass(frozen=True)
class StateGrid:
    """Two varied state dimensions; the rest pinned to base_state values."""

    dims: tuple[int, int]
    mins: tuple[float, float]
    maxs: tuple[float, float]
    resolution: tuple[int, int]
    base_state: tuple[float, ...]

    def __post_init__(self):
        if any(r < 2 for r in self.resolution):
            raise ValueError("grid resolution must be >= 2 per axis")
        if len(set(self.dims)) != 2 or any(d < 0 or d >= len(self.base_state) for d in self.dims):
            raise ValueError("grid dims must be two distinct indices into the state")

    def axis(self, k: int) -> np.ndarray:
        return np.linspace(self.mins[k], self.maxs[k], self.resolution[k])

    def states(self) -> np.ndarray:
        """(res0, res1, state_dim) array of pinned states."""
        res0, res1 = self.resolution
        out = np.tile(np.asarray(self.base_state, dtype=np.float64), (res0, res1, 1))
        a0, a1 = self.axis(0), self.axis(1)
        out[:, :, self.dims[0]] = a0[:, None]
        out[:, :, self.dims[1]] = a1[None, :]
        return out


def cartpole_default_grid(resolution: int = 21) -> StateGrid:
    """(x, theta) over the allowable region with velocities pinned to zero."""
    lim_theta = math.radians(12.0)
    return StateGrid(
        dims=(0, 2),
        mins=(-2.4, -lim_theta),
        maxs=(2.4, lim_theta),
        resolution=(resolution, resolution),
        base_state=(0.0, 0.0, 0.0, 0.0),
    )


def value_heatmap(checkpoint: PolicyCheckpoint, grid: StateGrid) -> np.ndarray:
    """Safety-critic value at each grid state under the deterministic policy.

    Uses min over the twin safety critics at the policy's mean action, the
    same pessimistic estimate the trainer optimises.
    """
    env = make_env(checkpoint.config)
    if len(grid.base_state) != env.observation_dim or checkpoint.config.env_id != "cartpole":
        raise ValueError("grid dimensions do not match the checkpoint's environment")
    states = grid.states()
    flat = states.reshape(-1, states.shape[-1])
    policy = checkpoint.build_policy()
    actions = policy.mean_action(flat)
    q = np.minimum(
        q_values(checkpoint.critic_spec, checkpoint.q_safe[0], flat, actions),
        q_values(checkpoint.critic_spec, checkpoint.q_safe[1], flat, actions),
    )
    return q.reshape(grid.resolution)


def empirical_safe_map(checkpoint: PolicyCheckpoint, grid: StateGrid,
                       episodes_per_cell: int, k_max: int, seed: int):
    """Monte-Carlo companion of value_heatmap.

    From each grid state, runs episodes with the stochastic policy and
    reports the mean discounted safety return and the fraction of episodes
    that survive k_max steps.
    """
    if episodes_per_cell < 1:
        raise ValueError("episodes_per_cell must be >= 1")
    config = checkpoint.config
    env = make_env(config)
    env.max_steps = k_max
    barriers, _ = reward_specs(config)
    policy = checkpoint.build_policy()
    gamma = config.gamma
    states = grid.states()
    res0, res1 = grid.resolution
    return_map = np.zeros((res0, res1))
    safe_map = np.zeros((res0, res1))

    for i in range(res0):
        for j in range(res1):
            cell_returns = 0.0
            cell_safe = 0
            for ep in range(episodes_per_cell):
                rng = np.random.default_rng(
                    substream_seed(seed, "safe-map", (i * res1 + j) * episodes_per_cell + ep)
                )
                obs = env.reset_to(states[i, j])
                feats = env.features()
                disc = 1.0
                ret = 0.0
                survived = True
                for _ in range(k_max):
                    a, _ = policy.sample(obs, rng)
                    obs, done, info = env.step(a)
                    feats2 = env.features()
                    ret += disc * reward_safety_composite(barriers, feats, feats2)
                    disc *= gamma
                    feats = feats2
                    if done:
                        survived = False
                        break
                    if info["truncated"]:
                        break
                cell_returns += ret
                cell_safe += survived
            return_map[i, j] = cell_returns / episodes_per_cell
            safe_map[i, j] = cell_safe / episodes_per_cell
    return return_map, safe_map


def consistency_stats(value_map: np.ndarray, safe_rate_map: np.ndarray,
                      mask: np.ndarray | None = None) -> float:
    """Spearman rank correlation between the two maps over valid cells."""
    a = np.asarray(value_map, dtype=np.float64)
    b = np.asarray(safe_rate_map, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("maps must have the same shape")
    if mask is not None:
        a, b = a[mask], b[mask]
    a, b = a.ravel(), b.ravel()
    if np.ptp(a) == 0.0 or np.ptp(b) == 0.0:
        raise DegenerateMapError("constant map: rank correlation undefined")
    rho = stats.spearmanr(a, b).statistic
    return float(rho)


def q_action_slice(checkpoint: PolicyCheckpoint, observation, action_grid) -> np.ndarray:
    """Safety-critic value across a 1-d action grid at a fixed observation,
    min-max normalised to [0, 1] (a constant slice collapses to zeros)."""
    action_grid = np.asarray(action_grid, dtype=np.float64)
    if action_grid.size == 0:
        raise ValueError("action grid must be nonempty")
    obs = np.asarray(observation, dtype=np.float64)
    n = action_grid.shape[0]
    s = np.tile(obs, (n, 1))
    a = action_grid.reshape(n, -1)
    q = np.minimum(
        q_values(checkpoint.critic_spec, checkpoint.q_safe[0], s, a),
        q_values(checkpoint.critic_spec, checkpoint.q_safe[1], s, a),
    )
    span = q.max() - q.min()
    if span == 0.0:
        return np.zeros(n)
    return (q - q.min()) / span


# --- exact tabular verification ---


@dataclass(frozen=True)
class TabularMdp:
    """Finite deterministic MDP with a barrier value per state.

    Rewards are the raw clipped margins min(h[s'] + (alpha0-1) h[s], 0), so a
    state is provably safe under a policy exactly when its value is zero.
    """

    next_state: np.ndarray  # (S, A) ints
    barrier: np.ndarray  # (S,)
    gamma: float
    alpha0: float

    def __post_init__(self):
        ns = np.asarray(self.next_state)
        h = np.asarray(self.barrier, dtype=np.float64)
        if ns.ndim != 2 or h.ndim != 1 or ns.shape[0] != h.shape[0]:
            raise ValueError("next_state must be (S, A) and barrier (S,)")
        if ns.min() < 0 or ns.max() >= ns.shape[0]:
            raise ValueError("transition table is not closed over the state set")
        if not 0.0 < self.gamma < 1.0 or not 0.0 < self.alpha0 < 1.0:
            raise ValueError("gamma and alpha0 must lie in (0, 1)")
        object.__setattr__(self, "next_state", ns.astype(np.int64))
        object.__setattr__(self, "barrier", h)

    @property
    def n_states(self) -> int:
        return self.next_state.shape[0]

    @property
    def n_actions(self) -> int:
        return self.next_state.shape[1]

    def rewards(self) -> np.ndarray:
        """(S, A) clipped-margin rewards."""
        h = self.barrier
        return np.minimum(h[self.next_state] + (self.alpha0 - 1.0) * h[:, None], 0.0)


def _rollout_states(mdp: TabularMdp, policy: np.ndarray, start: int, first_action: int | None = None):
    """Visited states until the (deterministic, hence eventually periodic)
    trajectory revisits a state."""
    visited = []
    seen = set()
    s = start
    if first_action is not None:
        visited.append(s)
        seen.add(s)
        s = int(mdp.next_state[s, first_action])
    while s not in seen:
        visited.append(s)
        seen.add(s)
        s = int(mdp.next_state[s, policy[s]])
    visited.append(s)  # closing state of the cycle
    return visited


def rollout_safe(mdp: TabularMdp, policy: np.ndarray, start: int, first_action: int | None = None) -> bool:
    """Exact decision: does the trajectory stay in the safe set forever?"""
    return all(mdp.barrier[s] >= 0.0 for s in _rollout_states(mdp, policy, start, first_action))


def policy_values(mdp: TabularMdp, policy: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Value of each state under a deterministic policy, iterated to tol.

    Zero rewards propagate exactly, so safe states end with V identically 0.
    """
    policy = np.asarray(policy, dtype=np.int64)
    r = mdp.rewards()[np.arange(mdp.n_states), policy]
    nxt = mdp.next_state[np.arange(mdp.n_states), policy]
    V = np.zeros(mdp.n_states)
    # Geometric contraction; the residual bound tol*(1-gamma) caps the true
    # error at tol.  The iteration cap is generous for any gamma < 1.
    for _ in range(200_000):
        V_new = r + mdp.gamma * V[nxt]
        delta = np.max(np.abs(V_new - V))
        V = V_new
        if delta <= tol * (1.0 - mdp.gamma):
            break
    return V


def action_values(mdp: TabularMdp, policy: np.ndarray, V: np.ndarray | None = None) -> np.ndarray:
    """Q(s, a) = r(s, a) + gamma V(next(s, a)) under the given policy."""
    if V is None:
        V = policy_values(mdp, policy)
    return mdp.rewards() + mdp.gamma * V[mdp.next_state]


def tabular_safety_oracle(mdp: TabularMdp, policy) -> tuple[np.ndarray, np.ndarray]:
    """Exact values and exact safe-set membership per start state."""
    policy = np.asarray(policy, dtype=np.int64)
    if policy.shape != (mdp.n_states,) or policy.min() < 0 or policy.max() >= mdp.n_actions:
        raise ValueError("policy table must map every state to a valid action")
    V = policy_values(mdp, policy)
    safe = np.array([rollout_safe(mdp, policy, s) for s in range(mdp.n_states)])
    return V, safe


def optimal_policy(mdp: TabularMdp, iters: int = 10_000, tol: float = 1e-13) -> np.ndarray:
    """Greedy policy from exact value iteration on the margin reward."""
    r = mdp.rewards()
    V = np.zeros(mdp.n_states)
    for _ in range(iters):
        Q = r + mdp.gamma * V[mdp.next_state]
        V_new = Q.max(axis=1)
        if np.max(np.abs(V_new - V)) <= tol:
            V = V_new
            break
        V = V_new
    Q = r + mdp.gamma * V[mdp.next_state]
    return Q.argmax(axis=1)


def random_mdp(rng: np.random.Generator, max_states: int = 20, max_actions: int = 4,
               gamma: float = 0.9, alpha0: float = 0.5) -> TabularMdp:
    """Random small instance with a mix of safe and unsafe states."""
    n_s = int(rng.integers(3, max_states + 1))
    n_a = int(rng.integers(2, max_actions + 1))
    h = rng.uniform(-1.0, 2.0, size=n_s)
    nxt = rng.integers(0, n_s, size=(n_s, n_a))
    return TabularMdp(next_state=nxt, barrier=h, gamma=gamma, alpha0=alpha0)


def random_policy(rng: np.random.Generator, mdp: TabularMdp) -> np.ndarray:
    return rng.integers(0, mdp.n_actions, size=mdp.n_states)


def margin_sharp_mdp(rng: np.random.Generator, max_states: int = 20, max_actions: int = 4,
                     gamma: float = 0.9, alpha0: float = 0.5) -> TabularMdp:
    """Instance where every margin violation jumps straight out of the safe
    set: each transition from a safe state either satisfies the decay
    condition or lands on a negative-barrier state.  On such instances a
    negative value implies the trajectory actually leaves the safe set, which
    makes pointwise value dominance order the violating start sets."""
    n_s = int(rng.integers(4, max_states + 1))
    n_a = int(rng.integers(2, max_actions + 1))
    h = np.concatenate([
        rng.uniform(0.0, 2.0, size=n_s // 2),
        rng.uniform(-1.0, -0.1, size=n_s - n_s // 2),
    ])
    rng.shuffle(h)
    unsafe = np.flatnonzero(h < 0.0)
    nxt = np.zeros((n_s, n_a), dtype=np.int64)
    for s in range(n_s):
        for a in range(n_a):
            if h[s] < 0.0:
                nxt[s, a] = int(rng.choice(unsafe))
                continue
            ok = np.flatnonzero(h >= (1.0 - alpha0) * h[s])
            if len(ok) and rng.random() < 0.7:
                nxt[s, a] = int(rng.choice(ok))
            else:
                nxt[s, a] = int(rng.choice(unsafe))
    return TabularMdp(next_state=nxt, barrier=h, gamma=gamma, alpha0=alpha0)


def theorem_suite(seed: int = 0, instances: int = 100) -> dict:
    """Exhaustive certificate check over random tabular instances.

    Counts counterexamples to both forms of the certificate property:
    value form (V=0 and h>=0 at the start implies the rollout stays safe)
    and action-value form (Q=0 and h>=0 implies the rollout taking that
    action first stays safe).  The expected count is zero.
    """
    rng = np.random.default_rng(seed)
    v_counter = 0
    q_counter = 0
    checked_v = 0
    checked_q = 0
    for _ in range(instances):
        mdp = random_mdp(rng)
        policy = random_policy(rng, mdp)
        V, _ = tabular_safety_oracle(mdp, policy)
        Q = action_values(mdp, policy, V)
        for s in range(mdp.n_states):
            if mdp.barrier[s] >= 0.0 and V[s] == 0.0:
                checked_v += 1
                if not rollout_safe(mdp, policy, s):
                    v_counter += 1
            for a in range(mdp.n_actions):
                if mdp.barrier[s] >= 0.0 and Q[s, a] == 0.0:
                    checked_q += 1
                    if not rollout_safe(mdp, policy, s, first_action=a):
                        q_counter += 1
    return {
        "instances": instances,
        "value_form_checked": checked_v,
        "value_form_counterexamples": v_counter,
        "action_form_checked": checked_q,
        "action_form_counterexamples": q_counter,
    }


def certified_mask(value_map: np.ndarray, gamma: float, k_max: int,
                   eps_fraction: float = 0.05) -> np.ndarray:
    """States whose critic value is within eps_fraction of the maximal
    achievable return, the practical certification threshold for function
    approximators that never hit the bound exactly."""
    bound = safe_return_upper_bound(gamma, k_max)
    return np.asarray(value_map) >= bound * (1.0 - eps_fraction)


def export_matrix(path, matrix: np.ndarray, meta: dict) -> None:
    """Plot-ready text matrix with '# key: value' metadata header lines."""
    header = "\n".join(f"{k}: {v}" for k, v in sorted(meta.items()))
    np.savetxt(path, np.asarray(matrix), header=header)


def load_matrix(path) -> np.ndarray:
    return np.loadtxt(path)
