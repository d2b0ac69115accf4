"""PPO mathematics: TD errors, GAE / TD(lambda) targets, clipped surrogate, critic loss, epoch schedule."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .networks import (
    AdamState,
    GaussianPolicyOutput,
    NonFiniteError,
    ParameterSet,
    PolicyValueNet,
    adam_step,
    gaussian_entropy,
    gaussian_kl,
    gaussian_log_prob,
    gaussian_log_prob_grads,
)


@dataclass
class TrajectoryBatch:
    observations: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    truncated: np.ndarray
    values: np.ndarray
    # V(s_{t+1}) at truncated steps, zero elsewhere
    bootstrap_values: np.ndarray
    episode_returns: list = field(default_factory=list)
    episode_lengths: list = field(default_factory=list)
    episode_endings: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def bootstrap_value(self) -> float:
        """Critic value at the state following the last transition (0 if it terminated)."""
        return float(self.bootstrap_values[-1]) if self.truncated[-1] else 0.0

    def validate(self) -> None:
        T = len(self.rewards)
        for name in ("observations", "actions", "log_probs", "dones", "truncated", "values", "bootstrap_values"):
            if len(getattr(self, name)) != T:
                raise ValueError(f"batch field {name} has length {len(getattr(self, name))}, expected {T}")
        if np.any(self.dones & self.truncated):
            raise ValueError("a transition cannot be both terminal and truncated")
        if T and not (self.dones[-1] or self.truncated[-1]):
            raise ValueError("the last transition must close its episode (terminal or truncated)")


@dataclass
class AdvantageSet:
    advantages: np.ndarray
    targets: np.ndarray


def td_errors(batch: TrajectoryBatch, gamma: float) -> np.ndarray:
    next_values = np.append(batch.values[1:], 0.0)
    next_values = np.where(batch.dones, 0.0, next_values)
    next_values = np.where(batch.truncated, batch.bootstrap_values, next_values)
    return batch.rewards + gamma * next_values - batch.values


def gae(batch: TrajectoryBatch, gamma: float, lam: float) -> AdvantageSet:
    """Backward-view TD(lambda) advantages, reset at every episode boundary."""
    delta = td_errors(batch, gamma)
    boundary = batch.dones | batch.truncated
    adv = np.zeros_like(delta)
    running = 0.0
    for t in range(len(delta) - 1, -1, -1):
        if boundary[t]:
            running = 0.0
        running = delta[t] + gamma * lam * running
        adv[t] = running
    return AdvantageSet(adv, adv + batch.values)


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    centered = adv - adv.mean()
    std = centered.std()
    return centered / std if std > 1e-12 else centered


def clipped_objective(ratio, adv, eps: float):
    """Per-sample min(rho*A, clip(rho)*A) and its derivative w.r.t. rho.

    The derivative is exactly zero wherever the clipped branch is the binding one
    (A > 0 with rho >= 1+eps, or A < 0 with rho <= 1-eps).
    """
    ratio = np.asarray(ratio, dtype=float)
    adv = np.asarray(adv, dtype=float)
    obj = np.minimum(ratio * adv, np.clip(ratio, 1 - eps, 1 + eps) * adv)
    dead = ((adv > 0) & (ratio >= 1 + eps)) | ((adv < 0) & (ratio <= 1 - eps))
    return obj, np.where(dead, 0.0, adv)


@dataclass
class Minibatch:
    observations: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray
    targets: np.ndarray
    old_values: np.ndarray
    old_policy: GaussianPolicyOutput | None = None


def ppo_surrogate(net: PolicyValueNet, params: ParameterSet, mb: Minibatch, eps: float,
                  entropy_coef: float = 0.0, grad: ParameterSet | None = None):
    """Negated clipped surrogate (minus optional entropy bonus) and its gradient.

    Returns ``(loss, grad, info)`` where ``info`` carries the ratios, the current
    policy and the clip fraction.
    """
    policy, cache = net.actor_forward(params, mb.observations, return_cache=True)
    log_prob = gaussian_log_prob(policy, mb.actions)
    ratio = np.exp(log_prob - mb.old_log_probs)
    if not np.all(np.isfinite(ratio)):
        raise NonFiniteError(f"non-finite probability ratio (max log-ratio {np.max(log_prob - mb.old_log_probs)})")
    n = len(ratio)
    obj, d_obj = clipped_objective(ratio, mb.advantages, eps)
    loss = -obj.mean()
    # d loss / d log_prob, through rho = exp(log_prob - old)
    d_logp = -(d_obj * ratio) / n
    g_mean, g_std = gaussian_log_prob_grads(policy, mb.actions)
    d_mean = d_logp[:, None] * g_mean
    d_std = d_logp[:, None] * g_std
    if entropy_coef:
        loss -= entropy_coef * float(np.mean(gaussian_entropy(policy)))
        d_std = d_std - entropy_coef / (n * policy.std)
    grad = net.actor_backward(params, cache, d_mean, d_std, grad)
    info = {
        "ratio": ratio,
        "policy": policy,
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > eps)),
    }
    return float(loss), grad, info


def critic_loss(net: PolicyValueNet, params: ParameterSet, observations, targets, *,
                old_values=None, clip_eps: float | None = None, grad: ParameterSet | None = None):
    """Mean squared error between V(s) and its TD(lambda) target, with gradient."""
    value, cache = net.critic_forward(params, np.atleast_2d(observations), return_cache=True)
    targets = np.atleast_1d(np.asarray(targets, dtype=float))
    err = value - targets
    n = len(err)
    if clip_eps is not None and old_values is not None:
        clipped = old_values + np.clip(value - old_values, -clip_eps, clip_eps)
        err_c = clipped - targets
        use_clipped = err_c ** 2 > err ** 2
        loss = float(np.mean(np.where(use_clipped, err_c ** 2, err ** 2)))
        inside = np.abs(value - old_values) < clip_eps
        d_value = np.where(use_clipped, 2 * err_c * inside, 2 * err) / n
    else:
        loss = float(np.mean(err ** 2))
        d_value = 2 * err / n
    grad = net.critic_backward(params, cache, d_value, grad)
    return loss, grad


def minibatch_gradient(net: PolicyValueNet, params: ParameterSet, mb: Minibatch, clip_eps: float, *,
                       entropy_coef: float = 0.0, value_clip: bool = False):
    """Joint actor + critic gradient for one minibatch (disjoint parameter segments)."""
    grad = net.zeros()
    p_loss, grad, info = ppo_surrogate(net, params, mb, clip_eps, entropy_coef, grad)
    v_loss, grad = critic_loss(net, params, mb.observations, mb.targets, old_values=mb.old_values,
                               clip_eps=clip_eps if value_clip else None, grad=grad)
    if not (np.isfinite(p_loss) and np.isfinite(v_loss)):
        raise NonFiniteError(f"non-finite loss (policy {p_loss}, value {v_loss})")
    kl = float(np.mean(gaussian_kl(mb.old_policy, info["policy"]))) if mb.old_policy is not None else 0.0
    stats = {"policy_loss": p_loss, "value_loss": v_loss, "kl": kl, "clip_frac": info["clip_frac"]}
    return grad.values, stats


def average_gradients(local_grads: Sequence[np.ndarray]) -> np.ndarray:
    """Coordinate-wise mean of per-worker gradients."""
    shapes = {np.shape(g) for g in local_grads}
    if len(shapes) != 1:
        raise ValueError(f"worker gradients have mismatched shapes: {sorted(shapes)}")
    return np.mean(np.stack(local_grads), axis=0)


def clip_grad_norm(grad: np.ndarray, params: ParameterSet, max_norm: float) -> np.ndarray:
    grad = grad.copy()
    for prefix in ("actor", "critic"):
        sl = params.network_slice(prefix)
        norm = np.linalg.norm(grad[sl])
        if norm > max_norm:
            grad[sl] *= max_norm / norm
    return grad


@dataclass
class WorkerData:
    batch: TrajectoryBatch
    advantages: AdvantageSet


def update_epochs(net: PolicyValueNet, data: Sequence[WorkerData], params: Sequence[ParameterSet],
                  adam_states: Sequence[AdamState], lr: float, epochs: int, minibatch_size: int,
                  clip_eps: float, rng: np.random.Generator, *, normalize: bool = True,
                  entropy_coef: float = 0.0, value_clip: bool = False, max_grad_norm: float | None = None,
                  average: Callable[[Sequence[np.ndarray]], np.ndarray] = average_gradients) -> dict:
    """Run ``epochs`` shuffled minibatch passes with per-minibatch gradient averaging.

    Each worker computes a local gradient on its own minibatch; the averaged
    gradient is applied by every worker through its own Adam state.  One shared
    shuffle order keeps minibatch indices aligned across workers.  The current
    parameters act as the old policy (snapshot taken on entry).
    """
    if not (len(data) == len(params) == len(adam_states)) or not data:
        raise ValueError("need one batch, parameter set and Adam state per worker")
    T = len(data[0].batch)
    if any(len(d.batch) != T for d in data):
        raise ValueError("all worker batches must have the same length")
    if T % minibatch_size:
        raise ValueError(f"batch size {T} is not divisible by minibatch size {minibatch_size}")

    prepared = []
    for d, p in zip(data, params):
        adv = normalize_advantages(d.advantages.advantages) if normalize else d.advantages.advantages
        old_policy = net.actor_forward(p, d.batch.observations)
        prepared.append((d.batch, adv, d.advantages.targets, old_policy))

    totals = {"policy_loss": 0.0, "value_loss": 0.0, "kl": 0.0, "clip_frac": 0.0}
    count = 0
    for _ in range(epochs):
        perm = rng.permutation(T)
        for start in range(0, T, minibatch_size):
            idx = perm[start:start + minibatch_size]
            local = []
            for (batch, adv, targets, old_policy), p in zip(prepared, params):
                mb = Minibatch(
                    batch.observations[idx], batch.actions[idx], batch.log_probs[idx], adv[idx],
                    targets[idx], batch.values[idx],
                    GaussianPolicyOutput(old_policy.mean[idx], old_policy.std[idx]),
                )
                g, stats = minibatch_gradient(net, p, mb, clip_eps, entropy_coef=entropy_coef, value_clip=value_clip)
                local.append(g)
                for key in totals:
                    totals[key] += stats[key]
                count += 1
            g_avg = average(local)
            if max_grad_norm:
                g_avg = clip_grad_norm(g_avg, params[0], max_grad_norm)
            for p, adam in zip(params, adam_states):
                adam_step(p, g_avg, adam, lr)
    return {key: value / max(count, 1) for key, value in totals.items()}
