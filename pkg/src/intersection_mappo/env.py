"""Episodic multi-vehicle intersection environment with noisy longitudinal kinematics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import EXPERIMENT_MODES, IntersectionLayout, Path, VehicleType, build_paths


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class RewardTable:
    collision: float = -50.0
    step: float = -1.0
    vehicle_pass: float = 10.0
    all_pass: float = 50.0


@dataclass(frozen=True)
class EnvConfig:
    vehicles: tuple[str, ...] = tuple(vt.name for vt in EXPERIMENT_MODES)
    dt: float = 0.1
    a_min: float = -3.0
    a_max: float = 3.0
    v_max: float = 15.0
    v_init_min: float = 3.0
    v_init_max: float = 8.0
    d_init_min: float = 30.0
    d_init_max: float = 50.0
    gap_min: float = 8.0
    d_pass: float = 15.0
    vehicle_radius: float = 1.25
    noise_std: float = 0.1
    max_steps: int = 200
    reward_collision: float = -50.0
    reward_step: float = -1.0
    reward_pass: float = 10.0
    reward_all_pass: float = 50.0

    @property
    def types(self) -> tuple[VehicleType, ...]:
        return tuple(VehicleType[name] for name in self.vehicles)

    @property
    def rewards(self) -> RewardTable:
        return RewardTable(self.reward_collision, self.reward_step, self.reward_pass, self.reward_all_pass)

    def validate(self) -> None:
        if not self.vehicles:
            raise ValueError("env.vehicles must name at least one vehicle type")
        for name in self.vehicles:
            if name not in VehicleType.__members__:
                raise ValueError(f"env.vehicles: unknown vehicle type {name!r}")
        if len(set(self.vehicles)) != len(self.vehicles):
            raise ValueError("env.vehicles: at most one vehicle of each type")
        for name in ("dt", "v_max", "d_pass", "vehicle_radius", "max_steps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"env.{name} must be positive")
        if not self.a_min < self.a_max:
            raise ValueError("env.a_min must be below env.a_max")
        if not 0 <= self.v_init_min <= self.v_init_max <= self.v_max:
            raise ValueError("env.v_init_min <= env.v_init_max <= env.v_max required")
        if not 0 < self.d_init_min <= self.d_init_max:
            raise ValueError("env.d_init_min must be positive and <= env.d_init_max")
        if self.gap_min < 0 or self.noise_std < 0:
            raise ValueError("env.gap_min and env.noise_std must be non-negative")


@dataclass(frozen=True)
class VehicleKinematicState:
    type: VehicleType
    d: float
    v: float
    passed: bool
    collided: bool


@dataclass(eq=False)
class EnvState:
    """Per-vehicle arrays in the fixed concatenation order of ``types``."""

    types: tuple[VehicleType, ...]
    d: np.ndarray
    v: np.ndarray
    passed: np.ndarray
    collided: np.ndarray
    step_count: int = 0
    done: bool = False

    @property
    def vehicles(self) -> list[VehicleKinematicState]:
        return [
            VehicleKinematicState(t, float(d), float(v), bool(p), bool(c))
            for t, d, v, p, c in zip(self.types, self.d, self.v, self.passed, self.collided)
        ]

    def copy(self) -> "EnvState":
        return EnvState(self.types, self.d.copy(), self.v.copy(), self.passed.copy(),
                        self.collided.copy(), self.step_count, self.done)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EnvState):
            return NotImplemented
        return (
            self.types == other.types
            and self.d.tobytes() == other.d.tobytes()
            and self.v.tobytes() == other.v.tobytes()
            and np.array_equal(self.passed, other.passed)
            and np.array_equal(self.collided, other.collided)
            and self.step_count == other.step_count
            and self.done == other.done
        )


@dataclass
class StepOutcome:
    observation: np.ndarray
    reward: float
    done: bool
    events: tuple[str, ...] = field(default_factory=tuple)

    @property
    def terminated(self) -> bool:
        """Ended by collision or all vehicles passing (no bootstrapping)."""
        return any(e == "all_passed" or e.startswith("collision:") for e in self.events)

    @property
    def truncated(self) -> bool:
        return self.done and not self.terminated

    @property
    def collisions(self) -> list[tuple[str, str]]:
        return [tuple(e.split(":", 1)[1].split("|")) for e in self.events if e.startswith("collision:")]

    @property
    def passed_types(self) -> list[str]:
        return [e.split(":", 1)[1] for e in self.events if e.startswith("vehicle_passed:")]


def observe(state: EnvState, cfg: EnvConfig, zone_radius: float) -> np.ndarray:
    obs = np.empty(2 * len(state.types))
    obs[0::2] = state.d / zone_radius
    obs[1::2] = state.v / cfg.v_max
    return obs


def detect_collisions(state: EnvState, paths: dict[VehicleType, Path], vehicle_radius: float) -> set[tuple[VehicleType, VehicleType]]:
    """Pairs of non-passed vehicles whose disc footprints overlap."""
    active = [i for i in range(len(state.types)) if not state.passed[i]]
    if len(active) < 2:
        return set()
    limit = 2 * vehicle_radius
    pts = []
    for i in active:
        path = paths[state.types[i]]
        pts.append((state.types[i], *path.xy(path.center_offset - float(state.d[i]))))
    pairs = set()
    for a in range(len(pts)):
        ta, xa, ya = pts[a]
        for b in range(a + 1, len(pts)):
            tb, xb, yb = pts[b]
            if math.hypot(xa - xb, ya - yb) < limit:
                pairs.add((ta, tb))
    return pairs


def transition(state: EnvState, action, cfg: EnvConfig, paths, zone_radius: float,
               noise: np.ndarray | None = None) -> tuple[EnvState, StepOutcome]:
    """One control period of the shared kinematics, reward and termination logic."""
    if state.done:
        raise EnvError("step called on a finished episode; reset first")
    action = np.asarray(action, dtype=float)
    n = len(state.types)
    if action.shape != (n,):
        raise EnvError(f"action must have shape ({n},), got {action.shape}")
    if not np.all(np.isfinite(action)):
        raise EnvError("action contains non-finite values")

    dt = cfg.dt
    accel = np.clip(action, cfg.a_min, cfg.a_max)
    if noise is not None:
        accel = accel + noise
    moving = ~(state.passed | state.collided)

    v_new = np.clip(state.v + accel * dt, 0.0, cfg.v_max)
    disp = np.maximum(state.v * dt + 0.5 * accel * dt * dt, 0.0)
    d_new = state.d - disp

    nxt = state.copy()
    nxt.d = np.where(moving, d_new, state.d)
    nxt.v = np.where(moving, v_new, state.v)
    nxt.step_count = state.step_count + 1

    newly_passed = moving & (nxt.d <= -cfg.d_pass)
    nxt.passed = state.passed | newly_passed
    nxt.d[newly_passed] = -cfg.d_pass

    events = [f"vehicle_passed:{state.types[i].name}" for i in np.flatnonzero(newly_passed)]
    reward = cfg.reward_step + cfg.reward_pass * int(newly_passed.sum())

    pairs = detect_collisions(nxt, paths, cfg.vehicle_radius)
    if pairs:
        index = {t: i for i, t in enumerate(state.types)}
        for a, b in sorted(pairs, key=lambda p: (index[p[0]], index[p[1]])):
            nxt.collided[index[a]] = True
            nxt.collided[index[b]] = True
            events.append(f"collision:{a.name}|{b.name}")
        reward += cfg.reward_collision

    if nxt.passed.all():
        events.append("all_passed")
        reward += cfg.reward_all_pass

    terminal = bool(pairs) or bool(nxt.passed.all())
    if not terminal and nxt.step_count >= cfg.max_steps:
        events.append("time_limit")
    nxt.done = terminal or nxt.step_count >= cfg.max_steps

    return nxt, StepOutcome(observe(nxt, cfg, zone_radius), float(reward), nxt.done, tuple(events))


def sample_initial_state(cfg: EnvConfig, paths, rng: np.random.Generator, max_tries: int = 10_000) -> EnvState:
    """Uniform initial (d, v); vehicles sharing an entrance lane keep ``gap_min`` of arc progress apart."""
    types = cfg.types
    hi = np.array([min(cfg.d_init_max, paths[t].center_offset) for t in types])
    lo = np.minimum(cfg.d_init_min, hi)
    offsets = np.array([paths[t].center_offset for t in types])
    groups = {}
    for i, t in enumerate(types):
        groups.setdefault(t.entrance, []).append(i)
    lanes = [np.array(g) for g in groups.values() if len(g) > 1]
    for _ in range(max_tries):
        d = rng.uniform(lo, hi)
        progress = offsets - d
        if all(np.diff(np.sort(progress[g])).min() >= cfg.gap_min for g in lanes):
            break
    else:
        raise EnvError("could not place vehicles with the requested entrance gap")
    v = rng.uniform(cfg.v_init_min, cfg.v_init_max, size=len(types))
    n = len(types)
    return EnvState(types, d, v, np.zeros(n, dtype=bool), np.zeros(n, dtype=bool))


class IntersectionEnv:
    """Stateful wrapper: owns the random stream for initial states and actuation noise."""

    def __init__(self, config: EnvConfig | None = None, layout: IntersectionLayout | None = None,
                 paths=None, seed: int | None = None):
        self.config = config or EnvConfig()
        self.config.validate()
        self.layout = layout or IntersectionLayout()
        self.paths = paths if paths is not None else build_paths(self.layout)
        self.rng = np.random.default_rng(seed)
        self.state: EnvState | None = None

    @property
    def n_vehicles(self) -> int:
        return len(self.config.vehicles)

    @property
    def observation_dim(self) -> int:
        return 2 * self.n_vehicles

    def reset(self, seed: int | None = None) -> tuple[EnvState, np.ndarray]:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state = sample_initial_state(self.config, self.paths, self.rng)
        return self.state.copy(), self.observation()

    def observation(self) -> np.ndarray:
        return observe(self.state, self.config, self.layout.zone_radius)

    def step(self, action: Sequence[float], noise_on: bool = True) -> tuple[EnvState, StepOutcome]:
        if self.state is None:
            raise EnvError("reset must be called before step")
        noise = None
        if noise_on and self.config.noise_std > 0:
            noise = self.rng.normal(0.0, self.config.noise_std, size=self.n_vehicles)
        self.state, outcome = transition(self.state, action, self.config, self.paths,
                                         self.layout.zone_radius, noise)
        return self.state.copy(), outcome

    def set_state(self, state: EnvState) -> None:
        self.state = state.copy()
