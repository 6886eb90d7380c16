"""Behaviour-regularised actor-critic on the task-augmented state (s, z).

Both losses take the task embedding ``z`` as a plain array: no gradient can
reach the context encoder from here.  Batches may carry leading task axes,
``batch`` of shape (..., B, 7) with ``z`` of shape (..., l); per-task losses
are means over B and are summed over tasks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .envs import ACTION_BOUND, ACTION_DIM, STATE_DIM
from .nn import ContractError, GradTape, Mlp, Tensor

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_LOG2 = math.log(2.0)

VALUE_PENALTY = "value-penalty"
POLICY_REGULARIZATION = "policy-regularization"


@dataclass
class Actor:
    net: Mlp
    action_bound: float = ACTION_BOUND

    @classmethod
    def build(cls, latent_dim, width, depth, rng, action_bound=ACTION_BOUND) -> Actor:
        widths = [STATE_DIM + latent_dim] + [width] * depth + [2 * ACTION_DIM]
        return cls(Mlp(widths, rng, "relu", "identity", name="actor"), action_bound)

    @property
    def params(self):
        return self.net.params


@dataclass
class Critic:
    q1: Mlp
    q2: Mlp
    q1_target: Mlp
    q2_target: Mlp

    @classmethod
    def build(cls, latent_dim, width, depth, rng) -> Critic:
        widths = [STATE_DIM + latent_dim + ACTION_DIM] + [width] * depth + [1]
        q1 = Mlp(widths, rng, "relu", "identity", name="q1")
        q2 = Mlp(widths, rng, "relu", "identity", name="q2")
        return cls(q1, q2, q1.copy("q1_target"), q2.copy("q2_target"))

    @property
    def params(self):
        return self.q1.params + self.q2.params

    @property
    def target_params(self):
        return self.q1_target.params + self.q2_target.params


@dataclass(frozen=True)
class DivergenceEstimator:
    kind: str = "mmd-rbf"
    samples_per_state: int = 1

    def __post_init__(self):
        if self.kind != "mmd-rbf":
            raise ValueError(f"unsupported divergence {self.kind!r}")
        if self.samples_per_state < 1:
            raise ValueError("samples_per_state must be >= 1")


@dataclass(frozen=True)
class RegularizationMode:
    mode: str = POLICY_REGULARIZATION
    strength: float = 0.0

    def __post_init__(self):
        if self.mode not in (VALUE_PENALTY, POLICY_REGULARIZATION):
            raise ValueError(f"unknown regularization mode {self.mode!r}")
        if self.strength < 0:
            raise ValueError("regularization strength must be >= 0")


def _broadcast_z(z, n_rows_shape) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return np.broadcast_to(z[..., None, :], (*n_rows_shape, z.shape[-1]))


def policy_head(actor: Actor, s, z, tape: GradTape | None = None) -> tuple[Tensor, Tensor]:
    """Pre-squash Gaussian mean and clamped log standard deviation."""
    s = np.asarray(s, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == s.ndim - 1:
        z = _broadcast_z(z, s.shape[:-1])
    out = nn.forward(actor.net, np.concatenate([s, z], axis=-1), tape)
    return out[..., :ACTION_DIM], nn.clip(out[..., ACTION_DIM:], LOG_STD_MIN, LOG_STD_MAX)


def sample_action(actor: Actor, s, z, rng, tape: GradTape | None = None,
                  deterministic: bool = False, noise=None) -> tuple[Tensor, Tensor]:
    """Reparameterised tanh-Gaussian sample and its log-density.

    ``s`` has shape (..., n, 2) and ``z`` either (..., n, l) or (..., l).
    The log-density is that of the bounded action itself, including the
    tanh change of variables and the action-bound scaling.
    """
    mean, log_std = policy_head(actor, s, z, tape)
    if deterministic:
        xi = np.zeros(mean.value.shape)
    else:
        xi = rng.standard_normal(mean.value.shape) if noise is None else np.asarray(noise)
    return _squashed_sample(actor, mean, log_std, xi, deterministic)


def _squashed_sample(actor, mean, log_std, xi, deterministic=False):
    u = mean if deterministic else mean + nn.exp(log_std) * xi
    action = actor.action_bound * nn.tanh(u)
    # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
    log_det = 2.0 * (_LOG2 - u - nn.softplus(-2.0 * u))
    log_prob = (-0.5 * xi * xi - _HALF_LOG_2PI - log_std
                - log_det - math.log(actor.action_bound)).sum(axis=-1)
    return action, log_prob


def q_values(net: Mlp, s, z, a, tape: GradTape | None = None, detached: bool = False) -> Tensor:
    """Q(s, z, a) for rows of shape (..., n, *); returns (..., n)."""
    s = np.asarray(s, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == s.ndim - 1:
        z = _broadcast_z(z, s.shape[:-1])
    sz = np.concatenate([s, z], axis=-1)
    if isinstance(a, Tensor) and a.tape is not None:
        x = nn.concat([nn.Tensor(sz), a], axis=-1)
    else:
        x = np.concatenate([sz, np.asarray(getattr(a, "value", a))], axis=-1)
    q = nn.forward(net, x, tape, detached)
    return q.reshape(q.value.shape[:-1])


def median_bandwidth(x: np.ndarray, y: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Median pairwise distance over the union of the two sample sets (per leading index)."""
    u = np.concatenate([x, y], axis=-2)
    n = u.shape[-2]
    i, j = np.triu_indices(n, k=1)
    d = np.sqrt(np.sum((u[..., i, :] - u[..., j, :]) ** 2, axis=-1))
    return np.maximum(np.median(d, axis=-1), floor)


def _kernel_mean(x: Tensor, y, bw2: np.ndarray, exclude_diagonal: bool) -> Tensor:
    n, m = x.value.shape[-2], np.shape(getattr(y, "value", y))[-2]
    lead = x.value.shape[:-2]
    d = x.value.shape[-1]
    diff = x.reshape(*lead, n, 1, d) - (y.reshape(*lead, 1, m, d) if isinstance(y, Tensor)
                                         else np.asarray(y).reshape(*lead, 1, m, d))
    sq = (diff * diff).sum(axis=-1)
    k = nn.exp(sq * (-0.5 / bw2[..., None, None]))
    if exclude_diagonal:
        return (k * (1.0 - np.eye(n))).sum(axis=(-2, -1)) * (1.0 / (n * (n - 1)))
    return k.sum(axis=(-2, -1)) * (1.0 / (n * m))


def mmd_estimate(policy_actions, behavior_actions, bandwidth=None) -> Tensor:
    """Unbiased squared MMD with an RBF kernel.

    Inputs have shape (..., n, d) and (..., m, d).  The default bandwidth is
    the median pairwise distance over the union of both sets, held fixed for
    differentiation.  Gradients flow into ``policy_actions`` only.
    """
    x = nn.as_tensor(policy_actions)
    y = np.asarray(getattr(behavior_actions, "value", behavior_actions), dtype=np.float64)
    if x.value.shape[-2] < 2 or y.shape[-2] < 2:
        raise ContractError("MMD needs at least two samples per set")
    if bandwidth is None:
        bw = median_bandwidth(x.value, y)
    else:
        bw = np.broadcast_to(np.asarray(bandwidth, dtype=np.float64), x.value.shape[:-2])
    bw2 = bw * bw
    kxx = _kernel_mean(x, x, bw2, True)
    kyy = _kernel_mean(Tensor(y), y, bw2, True)
    kxy = _kernel_mean(x, y, bw2, False)
    return kxx + kyy - 2.0 * kxy


def _check_batch(batch) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim < 2 or batch.shape[-2] == 0:
        raise ContractError("empty batch")
    return batch


def state_divergence(actor: Actor, s, z, a_first: Tensor, behavior, samples: int, rng,
                     tape: GradTape | None = None) -> Tensor:
    """Mean over states of the MMD between policy samples at s and the logged action at s.

    The logged action is a point mass, so its self-kernel term is exactly 1.
    With more than one sample per state the policy self-term uses the
    unbiased pair average; with a single sample it is the V-statistic value 1.
    The RBF bandwidth is the median-heuristic value over the whole batch.
    Returns one value per task (leading axes of ``s``).
    """
    behavior = np.asarray(behavior, dtype=np.float64)
    if samples > 1:
        extra_s = np.repeat(s, samples - 1, axis=-2)
        z_full = _broadcast_z(z, s.shape[:-1]) if np.ndim(z) == s.ndim - 1 else z
        extra_z = np.repeat(z_full, samples - 1, axis=-2)
        extra, _ = sample_action(actor, extra_s, extra_z, rng, tape)
        b = s.shape[-2]
        lead = s.shape[:-2]
        d = a_first.value.shape[-1]
        x = nn.concat([a_first.reshape(*lead, b, 1, d),
                       extra.reshape(*lead, b, samples - 1, d)], axis=-2)
    else:
        x = a_first.reshape(*a_first.value.shape[:-1], 1, a_first.value.shape[-1])
    bw = median_bandwidth(x.value.reshape(*s.shape[:-2], -1, x.value.shape[-1]), behavior)
    bw2 = (bw * bw)[..., None, None]  # (..., 1, 1) against (..., B, n)
    y = behavior[..., None, :]  # (..., B, 1, d)
    diff_xy = x - y
    kxy = nn.exp((diff_xy * diff_xy).sum(axis=-1) * (-0.5 / bw2))  # (..., B, n)
    n = x.value.shape[-2]
    if n > 1:
        dx = x.reshape(*x.value.shape[:-1], 1, x.value.shape[-1]) - \
            x.reshape(*x.value.shape[:-2], 1, n, x.value.shape[-1])
        kxx = nn.exp((dx * dx).sum(axis=-1) * (-0.5 / bw2[..., None]))
        self_term = (kxx * (1.0 - np.eye(n))).sum(axis=(-2, -1)) * (1.0 / (n * (n - 1)))
    else:
        self_term = 1.0
    per_state = self_term + 1.0 - 2.0 * kxy.mean(axis=-1)
    return per_state.mean(axis=-1)


def critic_targets(critic: Critic, actor: Actor, z, batch, div: DivergenceEstimator,
                   reg: RegularizationMode, gamma: float, temperature: float, rng,
                   reward_scale: float = 1.0) -> np.ndarray:
    """Bellman targets from the target critics; no tape, no gradient."""
    batch = _check_batch(batch)
    s2 = batch[..., 4:6]
    a2, logp2 = sample_action(actor, s2, z, rng)
    q_next = np.minimum(q_values(critic.q1_target, s2, z, a2).value,
                        q_values(critic.q2_target, s2, z, a2).value)
    soft = q_next - temperature * logp2.value
    if reg.mode == VALUE_PENALTY and reg.strength > 0:
        # no logged action exists at s'; compare the next-action sample set
        # with the batch's logged actions instead
        d = mmd_estimate(a2, batch[..., 2:4]).value
        soft = soft - reg.strength * np.asarray(d)[..., None]
    return reward_scale * batch[..., 6] + gamma * soft


def critic_loss(critic: Critic, actor: Actor, z, batch, div: DivergenceEstimator,
                reg: RegularizationMode, gamma: float, temperature: float, rng,
                tape: GradTape | None = None, reward_scale: float = 1.0) -> Tensor:
    """Squared TD error of both online critics against the shared twin-min target."""
    batch = _check_batch(batch)
    y = critic_targets(critic, actor, z, batch, div, reg, gamma, temperature, rng, reward_scale)
    s, a = batch[..., 0:2], batch[..., 2:4]
    total = None
    for net in (critic.q1, critic.q2):
        err = q_values(net, s, z, a, tape) - y
        term = (err * err).mean(axis=-1).sum()
        total = term if total is None else total + term
    return total


def actor_loss(actor: Actor, critic: Critic, z, batch, div: DivergenceEstimator,
               reg: RegularizationMode, temperature: float, rng,
               tape: GradTape | None = None, alpha: float | None = None,
               mean_reg: float = 0.0) -> Tensor:
    """Negative soft Q of fresh policy actions plus the divergence penalty.

    Critic parameters are read as constants, so the gradient reaches the
    actor only.  ``mean_reg`` adds a quadratic penalty on the pre-squash
    mean, which keeps the tanh away from saturation.
    """
    batch = _check_batch(batch)
    alpha = reg.strength if alpha is None else alpha
    s = batch[..., 0:2]
    mean, log_std = policy_head(actor, s, z, tape)
    a, logp = _squashed_sample(actor, mean, log_std, rng.standard_normal(mean.value.shape))
    q = nn.minimum(q_values(critic.q1, s, z, a, tape, detached=True),
                   q_values(critic.q2, s, z, a, tape, detached=True))
    loss = -(q - temperature * logp).mean(axis=-1)
    if mean_reg > 0:
        loss = loss + mean_reg * (mean * mean).sum(axis=-1).mean(axis=-1)
    if alpha > 0:
        loss = loss + alpha * state_divergence(actor, s, z, a, batch[..., 2:4],
                                               div.samples_per_state, rng, tape)
    return loss.sum()


def soft_update(target, online, tau: float) -> None:
    """target <- (1 - tau) * target + tau * online, parameter by parameter."""
    tp = target.params if hasattr(target, "params") else list(target)
    op = online.params if hasattr(online, "params") else list(online)
    if len(tp) != len(op):
        raise ContractError("target and online networks differ in parameter count")
    nn.soft_update_params(tp, op, tau)


def update_critic_targets(critic: Critic, tau: float) -> None:
    soft_update(critic.q1_target, critic.q1, tau)
    soft_update(critic.q2_target, critic.q2, tau)
