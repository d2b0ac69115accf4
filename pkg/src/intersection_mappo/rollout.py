"""Policy rollout loop shared by the real environment and the kinematics model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .networks import ParameterSet, PolicyValueNet, sample_action
from .ppo import TrajectoryBatch


@dataclass
class EpisodeCounter:
    """Running return/length of the episode in progress; survives across batches."""

    ret: float = 0.0
    length: int = 0


def ending_of(outcome) -> str:
    if outcome.collisions:
        return "collision"
    if "all_passed" in outcome.events:
        return "all_passed"
    return "time_limit"


def collect(stepper, net: PolicyValueNet, params: ParameterSet, T: int, rng: np.random.Generator,
            counter: EpisodeCounter | None = None, visited: list | None = None) -> TrajectoryBatch:
    """Run the stochastic policy on ``stepper`` for exactly ``T`` transitions.

    ``stepper`` is anything with ``state``, ``reset()``, ``observation()`` and
    ``step(action)``.  Episodes restart inline; an unfinished episode at the end
    of the batch is marked truncated and bootstrapped with the critic.  When
    ``visited`` is a list, pre-step states are appended to it.
    """
    if T <= 0:
        raise ValueError(f"rollout length must be positive, got {T}")
    counter = counter if counter is not None else EpisodeCounter()
    if stepper.state is None or stepper.state.done:
        stepper.reset()
        counter.ret, counter.length = 0.0, 0

    obs_dim = 2 * len(stepper.state.types)
    act_dim = len(stepper.state.types)
    observations = np.empty((T, obs_dim))
    actions = np.empty((T, act_dim))
    log_probs = np.empty(T)
    rewards = np.empty(T)
    values = np.empty(T)
    dones = np.zeros(T, dtype=bool)
    truncated = np.zeros(T, dtype=bool)
    bootstrap = np.zeros(T)
    ep_returns, ep_lengths, ep_endings = [], [], []

    obs = stepper.observation()
    for t in range(T):
        if visited is not None:
            visited.append(stepper.state.copy())
        policy = net.actor_forward(params, obs)
        action, log_prob = sample_action(policy, rng)
        observations[t] = obs
        actions[t] = action
        log_probs[t] = log_prob
        values[t] = net.critic_forward(params, obs)
        _, outcome = stepper.step(action)
        rewards[t] = outcome.reward
        counter.ret += outcome.reward
        counter.length += 1
        if outcome.done:
            if outcome.terminated:
                dones[t] = True
            else:
                truncated[t] = True
                bootstrap[t] = net.critic_forward(params, outcome.observation)
            ep_returns.append(counter.ret)
            ep_lengths.append(counter.length)
            ep_endings.append(ending_of(outcome))
            counter.ret, counter.length = 0.0, 0
            _, obs = stepper.reset()
        else:
            obs = outcome.observation
            if t == T - 1:
                truncated[t] = True
                bootstrap[t] = net.critic_forward(params, obs)

    return TrajectoryBatch(observations, actions, log_probs, rewards, dones, truncated, values, bootstrap,
                           ep_returns, ep_lengths, ep_endings)
