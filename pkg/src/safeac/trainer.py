"""Two-stage training orchestration.

Stage 1 trains the policy and twin safety critics on the barrier-derived
reward alone.  Stage 2 adds twin goal critics and keeps improving the actor
along the restricted direction: maximal first-order goal improvement subject
to non-negative first-order change of the safety objective (optionally with a
dot or cosine margin), while both critic heads keep regressing on fresh data.

Trade-off baselines (single stage, blended reward x*r1 + (1-x)*r2) and the
no-restriction ablation (stage 2 following the goal gradient only) are driven
by the same loop with flags, so all variants share environment and update
mechanics exactly.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .barriers import (
    reward_goal_clf,
    reward_safety_composite,
)
from .engine import (
    GaussianPolicy,
    ReplayBuffer,
    Transition,
    actor_loss_grad,
    critic_loss_grad,
    critic_target,
    q_values,
    soft_update,
)
from .nets import Adam, MlpSpec, ParamVector, init_params
from .projection import InfeasibleMarginError, MarginMode, solve_with_margin
from .seeding import stream, substream_seed
from .envs import (
    ContinuousCartPole,
    NavigationEnv,
    cartpole_barrier_specs,
    cartpole_lyapunov_spec,
    nav_barrier_spec,
    nav_lyapunov_spec,
)

ENV_IDS = ("cartpole", "navigation")
STAGES = ("stage1", "stage2", "tradeoff")

METRIC_FIELDS = (
    "step",
    "stage",
    "safe_rate",
    "success_rate",
    "collision_rate",
    "mean_r1_return",
    "mean_r2_return",
    "mean_episode_length",
)


class ConfigError(ValueError):
    """Bad configuration value or unknown key."""


class StateError(RuntimeError):
    """Checkpoint missing or used at the wrong stage."""


@dataclass
class TrainConfig:
    env_id: str = "cartpole"
    gamma: float = 0.99
    alpha0: float = 0.1
    beta0: float = 0.05
    stage1_steps: int = 50_000
    stage2_steps: int = 200_000
    batch_size: int = 256
    buffer_capacity: int = 1_000_000
    lr_actor: float = 3e-4
    lr_critic_safety: float = 3e-4
    lr_critic_goal: float = 3e-4
    entropy_weight: float = 0.02
    tau: float = 0.005
    margin_mode: str = "cosine"
    margin_delta: float = 0.1
    eval_interval: int = 5000
    eval_episodes: int = 10
    seed: int = 0
    actor_hidden: tuple[int, ...] = (64, 64)
    critic_hidden: tuple[int, ...] = (64, 64)
    start_steps: int = 1000
    update_after: int = 1000
    updates_per_step: int = 1
    max_episode_steps: int | None = None
    goal_x: float = 2.0
    tradeoff_mix: float | None = None
    restrict_updates: bool = True

    def __post_init__(self):
        if self.env_id not in ENV_IDS:
            raise ConfigError(f"unknown env_id {self.env_id!r}; choose from {ENV_IDS}")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        for name in ("alpha0", "beta0"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        for name in ("stage1_steps", "stage2_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("lr_actor", "lr_critic_safety", "lr_critic_goal", "tau"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"{name} must be > 0")
        if self.batch_size <= 0 or self.buffer_capacity <= 0:
            raise ConfigError("batch_size and buffer_capacity must be positive")
        if self.margin_mode not in ("none", "dot", "cosine"):
            raise ConfigError(f"unknown margin_mode {self.margin_mode!r}")
        if self.tradeoff_mix is not None and not 0.0 <= self.tradeoff_mix <= 1.0:
            raise ConfigError("tradeoff_mix must lie in [0, 1]")
        self.actor_hidden = tuple(int(n) for n in self.actor_hidden)
        self.critic_hidden = tuple(int(n) for n in self.critic_hidden)

    @property
    def episode_cap(self) -> int:
        """Maximum episode length; also the k_max of the return bound."""
        if self.max_episode_steps is not None:
            return self.max_episode_steps
        return 500 if self.env_id == "cartpole" else 1000

    def margin(self) -> MarginMode:
        if self.margin_mode == "none":
            return MarginMode("none")
        return MarginMode(self.margin_mode, self.margin_delta)

    def to_mapping(self) -> dict:
        d = dataclasses.asdict(self)
        d["actor_hidden"] = list(self.actor_hidden)
        d["critic_hidden"] = list(self.critic_hidden)
        return d

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(mapping) - fields
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(mapping)
        for key in ("actor_hidden", "critic_hidden"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    # --- flat key = value text format ---

    _TUPLE_KEYS = ("actor_hidden", "critic_hidden")

    def to_file(self, path) -> None:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {_format_value(v)}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        mapping = parse_config_text(Path(path).read_text())
        return cls.from_mapping(mapping)


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def parse_config_text(text: str) -> dict:
    """Parse 'key = value' lines; '#' starts a comment.  Types are coerced
    from the TrainConfig field declarations; unknown keys are errors."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    mapping: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        mapping[key] = _coerce_value(key, value)
    return mapping


def _coerce_value(key: str, value: str):
    if value.lower() == "none":
        return None
    if key == "env_id" or key == "margin_mode":
        return value
    if key in ("restrict_updates",):
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key} expects true/false, got {value!r}")
    if key in TrainConfig._TUPLE_KEYS:
        try:
            return tuple(int(x) for x in value.split(",") if x.strip())
        except ValueError as e:
            raise ConfigError(f"{key} expects comma-separated ints, got {value!r}") from e
    int_keys = {
        "stage1_steps", "stage2_steps", "batch_size", "buffer_capacity",
        "eval_interval", "eval_episodes", "seed", "start_steps",
        "update_after", "updates_per_step", "max_episode_steps",
    }
    try:
        if key in int_keys:
            return int(value)
        return float(value)
    except ValueError as e:
        raise ConfigError(f"could not parse value for {key}: {value!r}") from e


def make_env(config: TrainConfig):
    if config.env_id == "cartpole":
        return ContinuousCartPole(max_steps=config.episode_cap)
    return NavigationEnv(max_steps=config.episode_cap)


def reward_specs(config: TrainConfig):
    """Barrier list and Lyapunov function for the configured environment."""
    if config.env_id == "cartpole":
        return (
            list(cartpole_barrier_specs(config.alpha0)),
            cartpole_lyapunov_spec(config.goal_x, config.beta0),
        )
    return [nav_barrier_spec(config.alpha0)], nav_lyapunov_spec(config.beta0)


def build_actor_spec(config: TrainConfig, obs_dim: int, act_dim: int) -> MlpSpec:
    # tanh trunk keeps pre-squash outputs bounded, which stabilises the head.
    return MlpSpec((obs_dim, *config.actor_hidden, 2 * act_dim), activation="tanh")


def build_critic_spec(config: TrainConfig, obs_dim: int, act_dim: int) -> MlpSpec:
    return MlpSpec((obs_dim + act_dim, *config.critic_hidden, 1), activation="relu")


CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class PolicyCheckpoint:
    """Actor plus critic heads with enough metadata to rebuild and evaluate."""

    stage: str
    step: int
    config: TrainConfig
    actor_spec: MlpSpec
    critic_spec: MlpSpec
    actor: ParamVector
    q_safe: list[ParamVector]
    q_safe_target: list[ParamVector]
    q_goal: list[ParamVector] | None = None
    q_goal_target: list[ParamVector] | None = None
    q_mix: list[ParamVector] | None = None
    q_mix_target: list[ParamVector] | None = None

    def build_policy(self) -> GaussianPolicy:
        env_cls = ContinuousCartPole if self.config.env_id == "cartpole" else NavigationEnv
        return GaussianPolicy(self.actor_spec, self.actor, env_cls.action_low, env_cls.action_high)

    def save(self, path) -> None:
        arrays = {"actor": self.actor.values}
        groups = {
            "q_safe": self.q_safe,
            "q_safe_target": self.q_safe_target,
            "q_goal": self.q_goal,
            "q_goal_target": self.q_goal_target,
            "q_mix": self.q_mix,
            "q_mix_target": self.q_mix_target,
        }
        present = {}
        for name, group in groups.items():
            present[name] = 0 if group is None else len(group)
            if group:
                for i, pv in enumerate(group):
                    arrays[f"{name}_{i}"] = pv.values
        meta = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "stage": self.stage,
            "step": self.step,
            "config": self.config.to_mapping(),
            "actor_spec": self.actor_spec.to_dict(),
            "critic_spec": self.critic_spec.to_dict(),
            "groups": present,
            "version": __version__,
        }
        arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "PolicyCheckpoint":
        path = Path(path)
        if not path.exists():
            raise StateError(f"checkpoint not found: {path}")
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
                raise StateError(f"unsupported checkpoint format {meta.get('format_version')}")
            config = TrainConfig.from_mapping(meta["config"])
            actor_spec = MlpSpec.from_dict(meta["actor_spec"])
            critic_spec = MlpSpec.from_dict(meta["critic_spec"])
            ashapes = tuple(actor_spec.shapes())
            cshapes = tuple(critic_spec.shapes())
            actor = ParamVector(np.array(data["actor"]), ashapes)
            loaded: dict = {}
            for name, count in meta["groups"].items():
                if count:
                    loaded[name] = [
                        ParamVector(np.array(data[f"{name}_{i}"]), cshapes)
                        for i in range(count)
                    ]
                else:
                    loaded[name] = None
        return cls(
            stage=meta["stage"],
            step=meta["step"],
            config=config,
            actor_spec=actor_spec,
            critic_spec=critic_spec,
            actor=actor,
            q_safe=loaded["q_safe"] or [],
            q_safe_target=loaded["q_safe_target"] or [],
            q_goal=loaded["q_goal"],
            q_goal_target=loaded["q_goal_target"],
            q_mix=loaded["q_mix"],
            q_mix_target=loaded["q_mix_target"],
        )


@dataclass
class EpisodeRecord:
    """Per-step trace of one episode with the safety verdicts."""

    outcome: str
    length: int
    r1_return: float
    r2_return: float
    states: list
    actions: list
    r1: list
    r2: list
    state_safe: list  # all barrier values >= 0 at the post-step state

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class EvalReport:
    env_id: str
    stage: str
    n_episodes: int
    seed: int
    safe_rate: float | None
    goal_rate: float | None
    success_rate: float | None
    collision_rate: float | None
    timeout_rate: float | None
    avg_success_length: float | None
    mean_r1_return: float
    mean_r2_return: float
    mean_episode_length: float
    counts: dict

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class MetricLog:
    """Append-only line-delimited JSON records, replayable from disk."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def append(self, record: dict) -> None:
        missing = [k for k in METRIC_FIELDS if k not in record]
        if missing:
            raise ValueError(f"metric record missing fields: {missing}")
        ordered = {k: record[k] for k in METRIC_FIELDS}
        self.records.append(ordered)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(ordered, sort_keys=True) + "\n")

    @staticmethod
    def read(path) -> list[dict]:
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line]


def _init_twins(spec: MlpSpec, seeds: tuple[int, int]) -> list[ParamVector]:
    return [init_params(spec, seeds[0]), init_params(spec, seeds[1])]


class _Run:
    """Mutable training state driven by the run_* entry points."""

    def __init__(self, config: TrainConfig, checkpoint: PolicyCheckpoint | None = None,
                 buffer: ReplayBuffer | None = None):
        self.config = config
        self.env = make_env(config)
        self.barriers, self.lyapunov = reward_specs(config)
        self.env_rng = stream(config.seed, "env")
        self.explore_rng = stream(config.seed, "explore")
        self.replay_rng = stream(config.seed, "replay")
        self.update_rng = stream(config.seed, "update")

        obs_dim, act_dim = self.env.observation_dim, self.env.action_dim
        self.actor_spec = build_actor_spec(config, obs_dim, act_dim)
        self.critic_spec = build_critic_spec(config, obs_dim, act_dim)

        if checkpoint is None:
            actor = init_params(self.actor_spec, substream_seed(config.seed, "init-actor", 0))
            self.policy = GaussianPolicy(self.actor_spec, actor, self.env.action_low, self.env.action_high)
            self.q_safe = _init_twins(self.critic_spec, (
                substream_seed(config.seed, "init-q-safe", 0),
                substream_seed(config.seed, "init-q-safe", 1),
            ))
            self.q_safe_target = [pv.copy() for pv in self.q_safe]
        else:
            if checkpoint.actor_spec != self.actor_spec or checkpoint.critic_spec != self.critic_spec:
                raise StateError("checkpoint network sizes do not match the config")
            self.policy = GaussianPolicy(
                self.actor_spec, checkpoint.actor.copy(), self.env.action_low, self.env.action_high
            )
            self.q_safe = [pv.copy() for pv in checkpoint.q_safe]
            self.q_safe_target = [pv.copy() for pv in checkpoint.q_safe_target]

        self.q_goal: list[ParamVector] | None = None
        self.q_goal_target: list[ParamVector] | None = None
        self.q_mix: list[ParamVector] | None = None
        self.q_mix_target: list[ParamVector] | None = None

        self.buffer = buffer if buffer is not None else ReplayBuffer(
            config.buffer_capacity, obs_dim, act_dim
        )
        self.adam_actor = Adam(len(self.policy.params), config.lr_actor)
        self.adam_q_safe = [Adam(self.critic_spec.n_params, config.lr_critic_safety) for _ in range(2)]
        self.adam_q_goal: list[Adam] | None = None
        self.adam_q_mix: list[Adam] | None = None

        self.counters = {
            "updates": 0,
            "margin_fallbacks": 0,
            "zero_directions": 0,
            "constraint_checks": 0,
        }

    # --- pieces ---

    def init_goal_critics(self):
        self.q_goal = _init_twins(self.critic_spec, (
            substream_seed(self.config.seed, "init-q-goal", 0),
            substream_seed(self.config.seed, "init-q-goal", 1),
        ))
        self.q_goal_target = [pv.copy() for pv in self.q_goal]
        self.adam_q_goal = [Adam(self.critic_spec.n_params, self.config.lr_critic_goal) for _ in range(2)]

    def init_mix_critics(self):
        self.q_mix = _init_twins(self.critic_spec, (
            substream_seed(self.config.seed, "init-q-mix", 0),
            substream_seed(self.config.seed, "init-q-mix", 1),
        ))
        self.q_mix_target = [pv.copy() for pv in self.q_mix]
        self.adam_q_mix = [Adam(self.critic_spec.n_params, self.config.lr_critic_goal) for _ in range(2)]

    def checkpoint(self, stage: str, step: int) -> PolicyCheckpoint:
        return PolicyCheckpoint(
            stage=stage,
            step=step,
            config=self.config,
            actor_spec=self.actor_spec,
            critic_spec=self.critic_spec,
            actor=self.policy.params.copy(),
            q_safe=[pv.copy() for pv in self.q_safe],
            q_safe_target=[pv.copy() for pv in self.q_safe_target],
            q_goal=[pv.copy() for pv in self.q_goal] if self.q_goal else None,
            q_goal_target=[pv.copy() for pv in self.q_goal_target] if self.q_goal_target else None,
            q_mix=[pv.copy() for pv in self.q_mix] if self.q_mix else None,
            q_mix_target=[pv.copy() for pv in self.q_mix_target] if self.q_mix_target else None,
        )

    def _rewards(self, f, f2):
        r1 = reward_safety_composite(self.barriers, f, f2)
        r2 = reward_goal_clf(self.lyapunov, f, f2)
        return r1, r2

    def _critic_regression(self, critics, targets_pv, adams, batch, rewards, a2, logp2):
        cfg = self.config
        q_next = np.minimum(
            q_values(self.critic_spec, targets_pv[0], batch.s_next, a2),
            q_values(self.critic_spec, targets_pv[1], batch.s_next, a2),
        )
        y = critic_target(rewards, batch.done, cfg.gamma, q_next, cfg.entropy_weight * logp2)
        for k in range(2):
            _, grad = critic_loss_grad(self.critic_spec, critics[k], batch.s, batch.a, y)
            adams[k].step(critics[k].values, grad.values)

    def _soft_update_all(self):
        tau = self.config.tau
        self.q_safe_target = [soft_update(t, o, tau) for t, o in zip(self.q_safe_target, self.q_safe)]
        if self.q_goal is not None:
            self.q_goal_target = [soft_update(t, o, tau) for t, o in zip(self.q_goal_target, self.q_goal)]
        if self.q_mix is not None:
            self.q_mix_target = [soft_update(t, o, tau) for t, o in zip(self.q_mix_target, self.q_mix)]

    def update_single_head(self, head: str):
        """One soft actor-critic update on a single reward head
        (stage 1: the safety reward; trade-off runs: the blended reward)."""
        cfg = self.config
        batch = self.buffer.sample(cfg.batch_size, self.replay_rng)
        a2, logp2 = self.policy.sample(batch.s_next, self.update_rng)
        if head == "safety":
            critics, targets, adams = self.q_safe, self.q_safe_target, self.adam_q_safe
            rewards = batch.r1
        else:
            critics, targets, adams = self.q_mix, self.q_mix_target, self.adam_q_mix
            x = cfg.tradeoff_mix
            rewards = x * batch.r1 + (1.0 - x) * batch.r2
        self._critic_regression(critics, targets, adams, batch, rewards, a2, logp2)
        eps = self.update_rng.standard_normal((len(batch), self.env.action_dim))
        _, grad = actor_loss_grad(self.policy, self.critic_spec, critics, batch.s, eps, cfg.entropy_weight)
        self.adam_actor.step(self.policy.params.values, grad.values)
        self._soft_update_all()
        self.counters["updates"] += 1

    def update_restricted(self):
        """One stage-2 update: both critic heads regress, then the actor moves
        along the restricted (or raw goal, when unrestricted) direction."""
        cfg = self.config
        batch = self.buffer.sample(cfg.batch_size, self.replay_rng)
        a2, logp2 = self.policy.sample(batch.s_next, self.update_rng)
        self._critic_regression(self.q_safe, self.q_safe_target, self.adam_q_safe,
                                batch, batch.r1, a2, logp2)
        self._critic_regression(self.q_goal, self.q_goal_target, self.adam_q_goal,
                                batch, batch.r2, a2, logp2)

        eps = self.update_rng.standard_normal((len(batch), self.env.action_dim))
        _, grad_safe = actor_loss_grad(self.policy, self.critic_spec, self.q_safe,
                                       batch.s, eps, cfg.entropy_weight)
        _, grad_goal = actor_loss_grad(self.policy, self.critic_spec, self.q_goal,
                                       batch.s, eps, cfg.entropy_weight)
        g1 = -grad_safe.values
        g2 = -grad_goal.values

        if not cfg.restrict_updates:
            e = g2
        else:
            try:
                e = solve_with_margin(g1, g2, cfg.margin())
                self._check_direction(e, g1, cfg.margin())
            except InfeasibleMarginError:
                self.counters["margin_fallbacks"] += 1
                e = g1
        if np.any(e):
            self.adam_actor.step(self.policy.params.values, -e)
        else:
            # Fully conflicting gradients: skip rather than drift on stale
            # optimizer momentum.
            self.counters["zero_directions"] += 1
        self._soft_update_all()
        self.counters["updates"] += 1

    def _check_direction(self, e, g1, mode: MarginMode):
        self.counters["constraint_checks"] += 1
        ne = float(np.linalg.norm(e))
        if ne == 0.0:
            return
        d = float(e @ g1)
        if mode.kind == "none":
            ok = d >= -1e-9
        elif mode.kind == "dot":
            ok = d >= mode.delta - 1e-9
        else:
            n1 = float(np.linalg.norm(g1))
            ok = n1 == 0.0 or d / (ne * n1) >= mode.delta - 1e-9
        if not ok:
            raise RuntimeError(
                f"restricted update violated its constraint: e.g1={d}, mode={mode}"
            )


def _rollout_train(run: _Run, n_steps: int, *, head: str, stage: str,
                   random_warmup: bool, log: MetricLog | None, step_offset: int = 0):
    """Shared interaction loop: collect transitions, update, evaluate."""
    cfg = run.config
    env = run.env
    obs = env.reset(run.env_rng)
    feats = env.features()
    update_gate = max(cfg.batch_size, cfg.update_after if random_warmup else cfg.batch_size)

    for step in range(1, n_steps + 1):
        if random_warmup and step <= cfg.start_steps:
            a = run.explore_rng.uniform(env.action_low, env.action_high)
        else:
            a, _ = run.policy.sample(obs, run.explore_rng)
        obs2, done, info = env.step(a)
        feats2 = env.features()
        r1, r2 = run._rewards(feats, feats2)
        run.buffer.push(Transition(obs, np.atleast_1d(a), obs2, r1, r2, done, info["truncated"]))
        if done or info["truncated"]:
            obs = env.reset(run.env_rng)
            feats = env.features()
        else:
            obs, feats = obs2, feats2

        if len(run.buffer) >= update_gate:
            for _ in range(cfg.updates_per_step):
                if stage == "stage2":
                    run.update_restricted()
                else:
                    run.update_single_head(head)

        if log is not None and cfg.eval_interval > 0 and step % cfg.eval_interval == 0:
            ckpt = run.checkpoint(stage, step_offset + step)
            report = evaluate(
                ckpt,
                n_episodes=cfg.eval_episodes,
                seed=substream_seed(cfg.seed, "train-eval", step_offset + step),
            )
            log.append({
                "step": step_offset + step,
                "stage": stage,
                "safe_rate": report.safe_rate,
                "success_rate": report.success_rate,
                "collision_rate": report.collision_rate,
                "mean_r1_return": report.mean_r1_return,
                "mean_r2_return": report.mean_r2_return,
                "mean_episode_length": report.mean_episode_length,
            })


def run_stage1(config: TrainConfig, out_dir=None, log: MetricLog | None = None,
               _return_run: bool = False):
    """Safety-critic construction: soft actor-critic on the barrier reward."""
    run = _Run(config)
    if log is None and out_dir is not None:
        log = MetricLog(Path(out_dir) / "metrics.jsonl")
    if config.stage1_steps > 0:
        _rollout_train(run, config.stage1_steps, head="safety", stage="stage1",
                       random_warmup=True, log=log)
    ckpt = run.checkpoint("stage1", config.stage1_steps)
    if out_dir is not None:
        _write_run_outputs(out_dir, config, ckpt, run)
    if _return_run:
        return ckpt, run
    return ckpt


def run_stage2(checkpoint: PolicyCheckpoint, config: TrainConfig | None = None,
               out_dir=None, log: MetricLog | None = None,
               buffer: ReplayBuffer | None = None):
    """Restricted policy update from a stage-1 (or resumed stage-2) checkpoint."""
    if checkpoint.stage not in ("stage1", "stage2"):
        raise StateError(f"stage-2 training needs a stage1/stage2 checkpoint, got {checkpoint.stage!r}")
    config = config if config is not None else checkpoint.config
    run = _Run(config, checkpoint=checkpoint, buffer=buffer)
    run.init_goal_critics()
    if checkpoint.q_goal is not None:
        run.q_goal = [pv.copy() for pv in checkpoint.q_goal]
        run.q_goal_target = [pv.copy() for pv in checkpoint.q_goal_target]
    if log is None and out_dir is not None:
        log = MetricLog(Path(out_dir) / "metrics.jsonl")
    if config.stage2_steps > 0:
        _rollout_train(run, config.stage2_steps, head="goal", stage="stage2",
                       random_warmup=False, log=log, step_offset=checkpoint.step)
    ckpt = run.checkpoint("stage2", checkpoint.step + config.stage2_steps)
    if out_dir is not None:
        _write_run_outputs(out_dir, config, ckpt, run)
    return ckpt


def run_full(config: TrainConfig, out_dir=None):
    """Both stages in-process, sharing the replay buffer across the stage
    boundary so the safety critics keep fitting on all collected data."""
    log = MetricLog(Path(out_dir) / "metrics.jsonl") if out_dir is not None else None
    stage1_ckpt, run = run_stage1(config, log=log, _return_run=True)
    ckpt = run_stage2(stage1_ckpt, config, log=log, buffer=run.buffer)
    if out_dir is not None:
        _write_run_outputs(out_dir, config, ckpt, run)
    return ckpt


def run_tradeoff(config: TrainConfig, out_dir=None, log: MetricLog | None = None):
    """Single-stage baseline on the blended reward x*r1 + (1-x)*r2."""
    if config.tradeoff_mix is None:
        raise ConfigError("tradeoff runs need tradeoff_mix set in the config")
    run = _Run(config)
    run.init_mix_critics()
    if log is None and out_dir is not None:
        log = MetricLog(Path(out_dir) / "metrics.jsonl")
    if config.stage1_steps > 0:
        _rollout_train(run, config.stage1_steps, head="mix", stage="tradeoff",
                       random_warmup=True, log=log)
    ckpt = run.checkpoint("tradeoff", config.stage1_steps)
    if out_dir is not None:
        _write_run_outputs(out_dir, config, ckpt, run)
    return ckpt


def _write_run_outputs(out_dir, config: TrainConfig, ckpt: PolicyCheckpoint, run: _Run):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt.save(out / "checkpoint.npz")
    config.to_file(out / "config.snapshot")
    summary = {
        "stage": ckpt.stage,
        "step": ckpt.step,
        "counters": run.counters,
        "version": __version__,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def evaluate(checkpoint: PolicyCheckpoint, env=None, n_episodes: int = 100,
             seed: int = 0, record_episodes: bool = False):
    """Deterministic-mean-policy evaluation.

    CartPole reports the safe rate (episodes reaching the step cap inside the
    allowable region) and the goal rate (safe episodes ending within 0.3 m of
    the target).  Navigation reports success/collision/timeout rates and the
    average successful length; the success rate of a stage-1 checkpoint is
    reported as None since that policy does not pursue the goal.

    Returns an EvalReport, or (EvalReport, [EpisodeRecord]) when
    record_episodes is set.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    config = checkpoint.config
    if env is None:
        env = make_env(config)
    barriers, lyapunov = reward_specs(config)
    policy = checkpoint.build_policy()
    gamma = config.gamma

    outcomes = []
    lengths = []
    r1_returns = []
    r2_returns = []
    final_states = []
    records = []

    for ep in range(n_episodes):
        ep_rng = np.random.default_rng(substream_seed(seed, "eval-episode", ep))
        obs = env.reset(ep_rng)
        feats = env.features()
        disc = 1.0
        g1 = g2 = 0.0
        steps = 0
        outcome = "running"
        trace = {"states": [], "actions": [], "r1": [], "r2": [], "safe": []} if record_episodes else None
        while True:
            a = policy.mean_action(obs)
            obs, done, info = env.step(a)
            feats2 = env.features()
            r1 = reward_safety_composite(barriers, feats, feats2)
            r2 = reward_goal_clf(lyapunov, feats, feats2)
            g1 += disc * r1
            g2 += disc * r2
            disc *= gamma
            steps += 1
            if record_episodes:
                trace["states"].append([float(v) for v in feats2])
                trace["actions"].append([float(v) for v in np.atleast_1d(a)])
                trace["r1"].append(r1)
                trace["r2"].append(r2)
                trace["safe"].append(all(spec.value(feats2) >= 0.0 for spec in barriers))
            feats = feats2
            if done or info["truncated"]:
                outcome = info["outcome"]
                break
        outcomes.append(outcome)
        lengths.append(steps)
        r1_returns.append(g1)
        r2_returns.append(g2)
        final_states.append(feats)
        if record_episodes:
            records.append(EpisodeRecord(
                outcome=outcome, length=steps, r1_return=g1, r2_return=g2,
                states=trace["states"], actions=trace["actions"],
                r1=trace["r1"], r2=trace["r2"], state_safe=trace["safe"],
            ))

    n = float(n_episodes)
    counts = {k: outcomes.count(k) for k in ("safe", "violation", "success", "collision", "timeout")}
    if config.env_id == "cartpole":
        safe_rate = counts["safe"] / n
        goal = sum(
            1 for out, fs in zip(outcomes, final_states)
            if out == "safe" and abs(fs[0] - config.goal_x) <= 0.3
        )
        report = EvalReport(
            env_id=config.env_id, stage=checkpoint.stage, n_episodes=n_episodes, seed=seed,
            safe_rate=safe_rate, goal_rate=goal / n,
            success_rate=None, collision_rate=None, timeout_rate=None,
            avg_success_length=None,
            mean_r1_return=float(np.mean(r1_returns)),
            mean_r2_return=float(np.mean(r2_returns)),
            mean_episode_length=float(np.mean(lengths)),
            counts=counts,
        )
    else:
        succ_lengths = [l for out, l in zip(outcomes, lengths) if out == "success"]
        success_rate = counts["success"] / n if checkpoint.stage != "stage1" else None
        collision_rate = counts["collision"] / n
        report = EvalReport(
            env_id=config.env_id, stage=checkpoint.stage, n_episodes=n_episodes, seed=seed,
            safe_rate=1.0 - collision_rate, goal_rate=None,
            success_rate=success_rate,
            collision_rate=collision_rate,
            timeout_rate=counts["timeout"] / n,
            avg_success_length=float(np.mean(succ_lengths)) if succ_lengths else None,
            mean_r1_return=float(np.mean(r1_returns)),
            mean_r2_return=float(np.mean(r2_returns)),
            mean_episode_length=float(np.mean(lengths)),
            counts=counts,
        )
    if record_episodes:
        return report, records
    return report
