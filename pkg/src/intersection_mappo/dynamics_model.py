"""Known-kinematics prior model used for imagination rollouts.

The model is the noise-free mean of the environment dynamics, so it shares the
environment's transition function with actuation noise switched off.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import EnvConfig, EnvError, EnvState, StepOutcome, observe, sample_initial_state, transition
from .geometry import IntersectionLayout, build_paths
from .networks import ParameterSet, PolicyValueNet
from .ppo import TrajectoryBatch
from .rollout import collect

RESTART_STRATEGIES = ("reset", "real_states")


@dataclass(frozen=True)
class ModelRolloutConfig:
    horizon: int = 2048
    restart: str = "reset"

    def __post_init__(self):
        if int(self.horizon) <= 0:
            raise ValueError(f"model horizon must be positive, got {self.horizon}")
        if self.restart not in RESTART_STRATEGIES:
            raise ValueError(f"unknown imagination restart strategy {self.restart!r}")


class KinematicsModel:
    """Deterministic stepper over EnvState; episodes restart from the reset
    distribution or, optionally, from a buffer of visited real states."""

    def __init__(self, config: EnvConfig | None = None, layout: IntersectionLayout | None = None,
                 paths=None, seed: int | None = None):
        self.config = config or EnvConfig()
        self.layout = layout or IntersectionLayout()
        self.paths = paths if paths is not None else build_paths(self.layout)
        self.rng = np.random.default_rng(seed)
        self.state: EnvState | None = None
        self.start_states: list[EnvState] | None = None

    def imagine_step(self, state: EnvState, action) -> tuple[EnvState, StepOutcome]:
        return transition(state, action, self.config, self.paths, self.layout.zone_radius, None)

    def reset(self, seed: int | None = None):
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        if self.start_states:
            self.state = self.start_states[int(self.rng.integers(len(self.start_states)))].copy()
        else:
            self.state = sample_initial_state(self.config, self.paths, self.rng)
        return self.state.copy(), self.observation()

    def observation(self) -> np.ndarray:
        return observe(self.state, self.config, self.layout.zone_radius)

    def step(self, action, noise_on: bool = False):
        if self.state is None:
            raise EnvError("reset must be called before step")
        self.state, outcome = self.imagine_step(self.state, action)
        return self.state.copy(), outcome


def imagine_rollout(model: KinematicsModel, net: PolicyValueNet, params: ParameterSet,
                    config: ModelRolloutConfig, seed: int, start_states: list[EnvState] | None = None) -> TrajectoryBatch:
    """Exactly ``config.horizon`` imagined transitions under the current policy.

    Fully determined by ``seed`` (and the start-state buffer when restarting
    from real states).
    """
    reset_seq, policy_seq = np.random.SeedSequence(seed).spawn(2)
    model.rng = np.random.default_rng(reset_seq)
    model.start_states = [s for s in (start_states or []) if not s.done] if config.restart == "real_states" else None
    model.state = None
    return collect(model, net, params, config.horizon, np.random.default_rng(policy_seq))
