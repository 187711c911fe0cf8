"""Off-policy actor-critic machinery: replay, squashed Gaussian policy,
critic regression, and actor loss gradients.

Everything here is written against the flat-parameter networks in
``nets``; gradients are exact (finite-difference checked in the tests),
and sampling is reparameterised so that actor gradients flow through the
noise with common random numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nets import MlpSpec, ParamVector, backward_from_cache, forward_cached

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_LOG_2PI = math.log(2.0 * math.pi)
_LOG_2 = math.log(2.0)


@dataclass(frozen=True)
class Transition:
    """One replay record carrying both stage rewards."""

    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    r1: float
    r2: float
    done: bool
    truncated: bool

    def __post_init__(self):
        if not 0.0 < self.r1 <= 1.0:
            raise ValueError(f"stage-1 reward must lie in (0, 1], got {self.r1}")
        if self.r2 > 0.0:
            raise ValueError(f"stage-2 reward must be <= 0, got {self.r2}")
        if self.done and self.truncated:
            raise ValueError("done and truncated are mutually exclusive")


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    done: np.ndarray
    truncated: np.ndarray

    def __len__(self) -> int:
        return self.s.shape[0]


class ReplayBuffer:
    """Fixed-capacity ring with uniform sampling.

    Columnar storage keeps sampling a handful of fancy-index reads.  One
    writer; readers see a consistent snapshot because slots are written
    before ``size`` advances.
    """

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._s = np.zeros((capacity, obs_dim))
        self._a = np.zeros((capacity, act_dim))
        self._s2 = np.zeros((capacity, obs_dim))
        self._r1 = np.zeros(capacity)
        self._r2 = np.zeros(capacity)
        self._done = np.zeros(capacity, dtype=bool)
        self._trunc = np.zeros(capacity, dtype=bool)
        self._idx = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, t: Transition) -> None:
        i = self._idx
        self._s[i] = t.s
        self._a[i] = t.a
        self._s2[i] = t.s_next
        self._r1[i] = t.r1
        self._r2[i] = t.r2
        self._done[i] = t.done
        self._trunc[i] = t.truncated
        self._idx = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self._size, size=batch_size)
        return Batch(
            self._s[idx],
            self._a[idx],
            self._s2[idx],
            self._r1[idx],
            self._r2[idx],
            self._done[idx],
            self._trunc[idx],
        )


def _softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + exp(x)), overflow-safe.
    return np.logaddexp(0.0, x)


class GaussianPolicy:
    """tanh-squashed Gaussian mapped affinely into the action box.

    The trunk outputs (mean, log_std) per action dimension; log_std is
    clamped to [-20, 2].  Sampled actions always lie strictly inside the
    bounds, and log_prob includes the exact squash + affine corrections so
    exp(log_prob) is a proper density over the action box.
    """

    def __init__(self, spec: MlpSpec, params: ParamVector, low, high):
        low = np.asarray(low, dtype=np.float64)
        high = np.asarray(high, dtype=np.float64)
        if low.shape != high.shape or low.ndim != 1:
            raise ValueError("bounds must be 1-d arrays of equal length")
        if np.any(high <= low):
            raise ValueError("need high > low per action dimension")
        self.act_dim = low.shape[0]
        if spec.output_dim != 2 * self.act_dim:
            raise ValueError(
                f"trunk must emit 2 x {self.act_dim} outputs, got {spec.output_dim}"
            )
        self.spec = spec
        self.params = params
        self.low = low
        self.high = high
        self.center = (low + high) / 2.0
        self.halfspan = (high - low) / 2.0
        self._log_halfspan = float(np.log(self.halfspan).sum())

    @property
    def obs_dim(self) -> int:
        return self.spec.input_dim

    def _trunk(self, s):
        out, cache = forward_cached(self.spec, self.params, s)
        single = out.ndim == 1
        if single:
            out = out[None, :]
        mean = out[:, : self.act_dim]
        log_std_raw = out[:, self.act_dim :]
        log_std = np.clip(log_std_raw, LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std, log_std_raw, cache, single

    def _squash(self, u):
        t = np.tanh(u)
        a = self.center + self.halfspan * t
        return a, t

    def _log_prob_from(self, eps, log_std, u, _t_unused=None):
        # Gaussian term in eps plus the tanh and affine change-of-variable
        # corrections; log(1 - tanh(u)^2) = 2(log 2 - u - softplus(-2u)).
        log1m_t2 = 2.0 * (_LOG_2 - u - _softplus(-2.0 * u))
        per_dim = -0.5 * eps * eps - log_std - 0.5 * _LOG_2PI - log1m_t2
        return per_dim.sum(axis=1) - self._log_halfspan

    def sample(self, s, rng: np.random.Generator):
        """Draw (action, log_prob); action strictly inside the bounds."""
        mean, log_std, _, _, single = self._trunk(s)
        eps = rng.standard_normal(mean.shape)
        return self._finish_sample(mean, log_std, eps, single)

    def sample_with_noise(self, s, eps):
        """Reparameterised sample with caller-supplied noise (common random
        numbers for gradient checks)."""
        mean, log_std, _, _, single = self._trunk(s)
        eps = np.asarray(eps, dtype=np.float64).reshape(mean.shape)
        return self._finish_sample(mean, log_std, eps, single)

    def _finish_sample(self, mean, log_std, eps, single):
        std = np.exp(log_std)
        u = mean + std * eps
        a, t = self._squash(u)
        logp = self._log_prob_from(eps, log_std, u)
        if single:
            return a[0], float(logp[0])
        return a, logp

    def mean_action(self, s):
        """Deterministic squashed mean (evaluation policy)."""
        mean, _, _, _, single = self._trunk(s)
        a, _ = self._squash(mean)
        return a[0] if single else a

    def log_prob(self, s, a):
        """Exact log density of the squashed distribution at action a."""
        mean, log_std, _, _, single = self._trunk(s)
        a = np.asarray(a, dtype=np.float64)
        if single:
            a = a[None, :]
        t = np.clip((a - self.center) / self.halfspan, -1.0 + 1e-12, 1.0 - 1e-12)
        u = np.arctanh(t)
        std = np.exp(log_std)
        eps = (u - mean) / std
        logp = self._log_prob_from(eps, log_std, u)
        return float(logp[0]) if single else logp


def q_values(spec: MlpSpec, params: ParamVector, s, a) -> np.ndarray:
    """Scalar critic applied to concatenated (state, action) rows."""
    x = np.concatenate([s, a], axis=1)
    y, _ = forward_cached(spec, params, x)
    return y[:, 0]


def critic_target(r, done, gamma: float, q_next, entropy_term) -> np.ndarray:
    """Soft one-step backup: r + gamma (q_next - entropy_term), cut at terminals."""
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    r = np.asarray(r, dtype=np.float64)
    cont = 1.0 - np.asarray(done, dtype=np.float64)
    return r + gamma * cont * (np.asarray(q_next) - np.asarray(entropy_term))


def critic_loss_grad(spec: MlpSpec, params: ParamVector, s, a, targets):
    """Mean-squared regression of Q(s, a) onto targets; exact gradient."""
    if len(s) == 0:
        raise ValueError("empty minibatch")
    x = np.concatenate([s, a], axis=1)
    y, cache = forward_cached(spec, params, x)
    err = y[:, 0] - np.asarray(targets, dtype=np.float64)
    loss = float(np.mean(err * err))
    gy = (2.0 / len(err)) * err[:, None]
    grad, _ = backward_from_cache(spec, params, cache, gy)
    return loss, grad


def actor_loss_grad(
    policy: GaussianPolicy,
    critic_spec: MlpSpec,
    critic_params: Sequence[ParamVector],
    s,
    eps,
    entropy_weight: float,
):
    """Loss mean(entropy_weight * log_prob - min_k Q_k(s, a')) and its exact
    gradient w.r.t. the actor trunk, a' drawn by reparameterisation with the
    supplied noise.

    Descending the returned gradient raises the soft value of the policy's
    own actions, which is the practical form of the KL-projection policy
    improvement step.
    """
    if len(s) == 0:
        raise ValueError("empty minibatch")
    mean, log_std, log_std_raw, trunk_cache, _ = policy._trunk(s)
    eps = np.asarray(eps, dtype=np.float64).reshape(mean.shape)
    std = np.exp(log_std)
    u = mean + std * eps
    a, t = policy._squash(u)
    logp = policy._log_prob_from(eps, log_std, u)

    B = mean.shape[0]
    x = np.concatenate([s, a], axis=1)
    qs = []
    caches = []
    for p in critic_params:
        y, cache = forward_cached(critic_spec, p, x)
        qs.append(y[:, 0])
        caches.append(cache)
    qmat = np.stack(qs, axis=0)
    which = np.argmin(qmat, axis=0)
    qmin = qmat[which, np.arange(B)]
    loss = float(np.mean(entropy_weight * logp - qmin))

    # d loss / d action via the argmin critic of each sample.
    ga = np.zeros_like(a)
    obs_dim = s.shape[1]
    for k, (p, cache) in enumerate(zip(critic_params, caches)):
        mask = which == k
        if not mask.any():
            continue
        gy = np.where(mask, -1.0 / B, 0.0)[:, None]
        _, gx = backward_from_cache(critic_spec, p, cache, gy, need_param_grad=False)
        ga[mask] = gx[mask, obs_dim:]

    # Chain through a = center + halfspan tanh(u), u = mean + std eps, and the
    # entropy term d logp/du = 2 tanh(u).
    w = entropy_weight / B
    gu = ga * policy.halfspan * (1.0 - t * t) + w * 2.0 * t
    gmean = gu
    glog_std = -w + gu * (std * eps)
    clip_mask = (log_std_raw > LOG_STD_MIN) & (log_std_raw < LOG_STD_MAX)
    glog_std = np.where(clip_mask, glog_std, 0.0)
    gout = np.concatenate([gmean, glog_std], axis=1)
    grad, _ = backward_from_cache(policy.spec, policy.params, trunk_cache, gout)
    return loss, grad


def soft_update(target: ParamVector, online: ParamVector, tau: float) -> ParamVector:
    """tau-blend of online into target parameters (elementwise)."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    if target.shapes != online.shapes:
        raise ValueError("parameter shape tables differ")
    return ParamVector(tau * online.values + (1.0 - tau) * target.values, target.shapes)
