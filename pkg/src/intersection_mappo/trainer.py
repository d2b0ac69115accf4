"""MA-PPO / PPO training across synchronised data-parallel workers."""
from __future__ import annotations

import logging
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as config_mod
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .dynamics_model import KinematicsModel, ModelRolloutConfig, imagine_rollout
from .env import EnvState, IntersectionEnv
from .geometry import build_paths
from .networks import AdamState, NonFiniteError, ParameterSet, PolicyValueNet
from .ppo import TrajectoryBatch, WorkerData, average_gradients, gae, update_epochs
from .reporting import IterationReport, MetricsWriter, truncate_metrics
from .rollout import EpisodeCounter, collect

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.ckpt"
METRICS_NAME = "metrics.csv"


def lr_schedule(progress: float, lr_start: float = 3e-4, lr_end: float = 0.0) -> float:
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"training progress must lie in [0, 1], got {progress}")
    return lr_start + (lr_end - lr_start) * progress


def build_net(cfg: RunConfig) -> PolicyValueNet:
    n = len(cfg.env.vehicles)
    return PolicyValueNet(2 * n, n, cfg.net.hidden, cfg.net.sigma_min)


@dataclass
class Worker:
    index: int
    env: IntersectionEnv
    model: KinematicsModel
    policy_rng: np.random.Generator
    model_seed_rng: np.random.Generator
    params: ParameterSet
    adam: AdamState
    counter: EpisodeCounter = field(default_factory=EpisodeCounter)


def collect_rollout(worker: Worker, net: PolicyValueNet, T: int, visited: list | None = None) -> TrajectoryBatch:
    """T real transitions from the worker's private environment under its current parameters."""
    return collect(worker.env, net, worker.params, T, worker.policy_rng, worker.counter, visited)


def _remote_collect(worker: Worker, net: PolicyValueNet, T: int, keep_states: bool):
    visited = [] if keep_states else None
    batch = collect_rollout(worker, net, T, visited)
    return batch, worker, visited


class Trainer:
    """One seed's training run.

    ``identical_workers`` gives every worker the random streams of worker 0, so
    the K-worker run must reproduce a single-worker run exactly.
    """

    def __init__(self, cfg: RunConfig, seed: int, identical_workers: bool = False):
        self.cfg = cfg
        self.seed = int(seed)
        self.identical_workers = identical_workers
        self.net = build_net(cfg)
        self.paths = build_paths(cfg.layout)
        K = cfg.train.workers
        root = np.random.SeedSequence(self.seed)
        params = self.net.init_params(np.random.default_rng(_child(root, 0)))
        self.shuffle_rng = np.random.default_rng(_child(root, 1))
        self.workers = []
        for k in range(K):
            stream = 0 if identical_workers else k
            env_seq, policy_seq, model_seq = (_child(root, 2, stream, j) for j in range(3))
            self.workers.append(Worker(
                index=k,
                env=IntersectionEnv(cfg.env, cfg.layout, self.paths, seed=env_seq),
                model=KinematicsModel(cfg.env, cfg.layout, self.paths),
                policy_rng=np.random.default_rng(policy_seq),
                model_seed_rng=np.random.default_rng(model_seq),
                params=params.copy(),
                adam=AdamState.for_params(params, cfg.net.adam_eps, cfg.net.adam_beta1, cfg.net.adam_beta2),
            ))
        self.iteration = 0
        self.env_steps = 0
        self.model_steps = 0
        self.last_episode_endings: list[str] = []
        self._t0 = time.perf_counter()

    # -- bookkeeping ---------------------------------------------------------

    @property
    def params(self) -> ParameterSet:
        return self.workers[0].params

    @property
    def steps_per_iteration(self) -> int:
        return self.cfg.train.workers * self.cfg.train.batch_size

    @property
    def finished(self) -> bool:
        return self.env_steps >= self.cfg.train.total_timesteps

    def current_lr(self) -> float:
        t = self.cfg.train
        progress = min(self.env_steps / t.total_timesteps, 1.0)
        return lr_schedule(progress, t.lr_start, t.lr_end)

    def assert_synchronized(self) -> None:
        ref = self.workers[0]
        for w in self.workers[1:]:
            if (w.params.values.tobytes() != ref.params.values.tobytes()
                    or w.adam.m.tobytes() != ref.adam.m.tobytes()
                    or w.adam.v.tobytes() != ref.adam.v.tobytes()
                    or w.adam.t != ref.adam.t):
                raise RuntimeError(f"worker {w.index} diverged from worker 0")

    # -- phases --------------------------------------------------------------

    def _collect_real(self, keep_states: bool):
        T = self.cfg.train.batch_size
        if self.cfg.run.deterministic or len(self.workers) == 1:
            results = []
            for w in self.workers:
                visited = [] if keep_states else None
                results.append((collect_rollout(w, self.net, T, visited), visited))
            return results
        with ProcessPoolExecutor(max_workers=len(self.workers)) as pool:
            futures = [pool.submit(_remote_collect, w, self.net, T, keep_states) for w in self.workers]
            outputs = [f.result() for f in futures]
        results = []
        for k, (batch, remote, visited) in enumerate(outputs):
            local = self.workers[k]
            local.env, local.policy_rng, local.counter = remote.env, remote.policy_rng, remote.counter
            results.append((batch, visited))
        return results

    def _update(self, batches: list[TrajectoryBatch], lr: float) -> dict:
        t = self.cfg.train
        data = [WorkerData(b, gae(b, t.gamma, t.lam)) for b in batches]
        return update_epochs(
            self.net, data, [w.params for w in self.workers], [w.adam for w in self.workers],
            lr, t.epochs, t.minibatch_size, t.clip_eps, self.shuffle_rng,
            normalize=t.normalize_advantages, entropy_coef=t.entropy_coef, value_clip=t.value_clip,
            max_grad_norm=t.max_grad_norm or None, average=average_gradients,
        )

    def train_iteration(self) -> IterationReport:
        """Real phase, then (for MA-PPO) ``M`` imagination phases."""
        t = self.cfg.train
        lr = self.current_lr()
        M = t.model_iterations if t.algo == "mappo" else 0
        keep_states = M > 0 and t.imagination_restart == "real_states"

        results = self._collect_real(keep_states)
        batches = [b for b, _ in results]
        returns = [r for b in batches for r in b.episode_returns]
        lengths = [n for b in batches for n in b.episode_lengths]
        self.last_episode_endings = [e for b in batches for e in b.episode_endings]
        phase_stats = [self._update(batches, lr)]
        self.env_steps += self.steps_per_iteration

        model_cfg = ModelRolloutConfig(t.model_horizon, t.imagination_restart)
        for _ in range(M):
            imagined = []
            for w, (_, visited) in zip(self.workers, results):
                seed = int(w.model_seed_rng.integers(2**63))
                imagined.append(imagine_rollout(w.model, self.net, w.params, model_cfg, seed, visited))
            phase_stats.append(self._update(imagined, lr))
            self.model_steps += len(self.workers) * t.model_horizon

        self.iteration += 1
        stats = {k: float(np.mean([s[k] for s in phase_stats])) for k in phase_stats[0]}
        for key, value in stats.items():
            if not math.isfinite(value):
                raise NonFiniteError(f"non-finite {key} at iteration {self.iteration}")
        wallclock = 0.0 if self.cfg.run.deterministic else time.perf_counter() - self._t0
        return IterationReport(
            iteration=self.iteration,
            env_steps=self.env_steps,
            model_steps=self.model_steps,
            mean_ep_reward=float(np.mean(returns)) if returns else math.nan,
            mean_ep_len=float(np.mean(lengths)) if lengths else math.nan,
            policy_loss=stats["policy_loss"],
            value_loss=stats["value_loss"],
            kl=stats["kl"],
            clip_frac=stats["clip_frac"],
            lr=lr,
            wallclock_s=wallclock,
        )

    # -- checkpointing ------------------------------------------------------

    def to_checkpoint(self) -> Checkpoint:
        self.assert_synchronized()
        w0 = self.workers[0]
        arrays = {"params": w0.params.values, "adam.m": w0.adam.m, "adam.v": w0.adam.v}
        workers_meta = []
        for w in self.workers:
            state = w.env.state
            if state is not None:
                arrays[f"worker{w.index}.d"] = state.d
                arrays[f"worker{w.index}.v"] = state.v
                arrays[f"worker{w.index}.passed"] = state.passed
                arrays[f"worker{w.index}.collided"] = state.collided
            workers_meta.append({
                "env_rng": w.env.rng.bit_generator.state,
                "policy_rng": w.policy_rng.bit_generator.state,
                "model_seed_rng": w.model_seed_rng.bit_generator.state,
                "has_state": state is not None,
                "step_count": state.step_count if state is not None else 0,
                "done": state.done if state is not None else False,
                "episode_return": w.counter.ret,
                "episode_length": w.counter.length,
            })
        meta = {
            "seed": self.seed,
            "identical_workers": self.identical_workers,
            "iteration": self.iteration,
            "env_steps": self.env_steps,
            "model_steps": self.model_steps,
            "adam_t": w0.adam.t,
            "shuffle_rng": self.shuffle_rng.bit_generator.state,
            "workers": workers_meta,
        }
        return Checkpoint(config_mod.dumps(self.cfg), arrays, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Trainer":
        cfg = config_mod.loads(ckpt.config_text)
        meta = ckpt.meta
        trainer = cls(cfg, meta["seed"], meta["identical_workers"])
        if len(meta["workers"]) != len(trainer.workers):
            raise ValueError("checkpoint worker count does not match its config")
        if ckpt.arrays["params"].shape != trainer.params.values.shape:
            raise ValueError("checkpoint parameter vector does not match the network architecture")
        trainer.iteration = meta["iteration"]
        trainer.env_steps = meta["env_steps"]
        trainer.model_steps = meta["model_steps"]
        trainer.shuffle_rng.bit_generator.state = meta["shuffle_rng"]
        types = cfg.env.types
        for w, wm in zip(trainer.workers, meta["workers"]):
            w.params.values[...] = ckpt.arrays["params"]
            w.adam.m[...] = ckpt.arrays["adam.m"]
            w.adam.v[...] = ckpt.arrays["adam.v"]
            w.adam.t = meta["adam_t"]
            w.env.rng.bit_generator.state = wm["env_rng"]
            w.policy_rng.bit_generator.state = wm["policy_rng"]
            w.model_seed_rng.bit_generator.state = wm["model_seed_rng"]
            w.counter = EpisodeCounter(wm["episode_return"], wm["episode_length"])
            if wm["has_state"]:
                i = w.index
                w.env.state = EnvState(
                    types,
                    ckpt.arrays[f"worker{i}.d"].copy(), ckpt.arrays[f"worker{i}.v"].copy(),
                    ckpt.arrays[f"worker{i}.passed"].copy(), ckpt.arrays[f"worker{i}.collided"].copy(),
                    wm["step_count"], wm["done"],
                )
        return trainer


def _child(seq: np.random.SeedSequence, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seq.entropy, spawn_key=seq.spawn_key + keys)


@dataclass
class SeedResult:
    seed: int
    out_dir: Path
    reports: list[IterationReport]
    error: str | None = None


def train_seed(cfg: RunConfig, seed: int, out_dir, max_iterations: int | None = None,
               resume: bool = False, on_report=None) -> SeedResult:
    """Train one seed into ``out_dir``; resumes from ``out_dir/checkpoint.ckpt`` when asked."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / CHECKPOINT_NAME
    metrics_path = out_dir / METRICS_NAME
    if resume and ckpt_path.exists():
        trainer = Trainer.from_checkpoint(load_checkpoint(ckpt_path))
        truncate_metrics(metrics_path, trainer.iteration)
        append = True
    else:
        trainer = Trainer(cfg, seed)
        config_mod.save_config(cfg, out_dir / "config.txt")
        append = False

    reports = []
    every = trainer.cfg.run.checkpoint_every
    done_iters = 0
    with MetricsWriter(metrics_path, append=append) as writer:
        try:
            while not trainer.finished and (max_iterations is None or done_iters < max_iterations):
                report = trainer.train_iteration()
                writer.write(report)
                reports.append(report)
                done_iters += 1
                if on_report is not None:
                    on_report(report)
                if every and trainer.iteration % every == 0:
                    save_checkpoint(ckpt_path, trainer.to_checkpoint())
        except NonFiniteError as exc:
            log.error("seed %s aborted at iteration %s: %s", seed, trainer.iteration, exc)
            (out_dir / "error.txt").write_text(f"{exc}\n")
            return SeedResult(seed, out_dir, reports, str(exc))
    save_checkpoint(ckpt_path, trainer.to_checkpoint())
    return SeedResult(seed, out_dir, reports)


def train(cfg: RunConfig, out_dir=None, seeds=None, max_iterations: int | None = None,
          resume: bool = False) -> list[SeedResult]:
    """Run every requested seed into its own ``seed_<n>`` directory; a failing seed does not stop the rest."""
    out_dir = Path(out_dir or cfg.run.out_dir)
    results = []
    for seed in (seeds if seeds is not None else cfg.train.seeds):
        seed_dir = out_dir / f"seed_{seed}"
        try:
            results.append(train_seed(cfg, seed, seed_dir, max_iterations, resume))
        except Exception as exc:  # noqa: BLE001 - isolate per-seed failures
            log.error("seed %s failed: %s", seed, exc)
            seed_dir.mkdir(parents=True, exist_ok=True)
            (seed_dir / "error.txt").write_text(traceback.format_exc())
            results.append(SeedResult(seed, seed_dir, [], f"{type(exc).__name__}: {exc}"))
    return results


# -- evaluation & replay --------------------------------------------------------


def greedy_episode(env: IntersectionEnv, net: PolicyValueNet, params: ParameterSet, seed: int):
    """Run the mean action until the episode ends; yields (state, action, outcome) per step."""
    state, obs = env.reset(seed)
    steps = []
    while True:
        action = net.actor_forward(params, obs).mean
        state, outcome = env.step(action)
        steps.append((state, action, outcome))
        obs = outcome.observation
        if outcome.done:
            return steps


def evaluate(cfg: RunConfig, params: ParameterSet, episodes: int, seed: int = 0) -> dict:
    net = build_net(cfg)
    env = IntersectionEnv(cfg.env, cfg.layout)
    seeds = np.random.SeedSequence(seed).generate_state(episodes, dtype=np.uint64)
    rewards, lengths, collisions = [], [], 0
    for s in seeds:
        steps = greedy_episode(env, net, params, int(s))
        rewards.append(sum(o.reward for _, _, o in steps))
        lengths.append(len(steps))
        collisions += bool(steps[-1][2].collisions)
    return {
        "episodes": episodes,
        "mean_reward": float(np.mean(rewards)),
        "std_reward": float(np.std(rewards)),
        "mean_length": float(np.mean(lengths)),
        "collision_rate": collisions / episodes,
    }


def replay_records(cfg: RunConfig, params: ParameterSet, seed: int) -> list[dict]:
    """Per-vehicle records of one greedy episode; t = 0 is the initial state (no action yet)."""
    net = build_net(cfg)
    env = IntersectionEnv(cfg.env, cfg.layout)
    state, _ = env.reset(seed)
    records = []

    def emit(t, state, action, reward, events):
        for i, vt in enumerate(state.types):
            path = env.paths[vt]
            x, y, _ = path.poses_at_progress(path.center_offset - state.d[i])[0]
            records.append({
                "t": t,
                "vehicle_type": vt.name,
                "d": float(state.d[i]),
                "v": float(state.v[i]),
                "a": None if action is None else float(np.clip(action[i], cfg.env.a_min, cfg.env.a_max)),
                "x": float(x),
                "y": float(y),
                "reward": reward,
                "events": list(events),
            })

    emit(0, state, None, 0.0, ())
    for t, (state, action, outcome) in enumerate(greedy_episode(env, net, params, seed), start=1):
        emit(t, state, action, outcome.reward, outcome.events)
    return records
