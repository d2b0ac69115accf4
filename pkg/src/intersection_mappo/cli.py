"""Command-line entry point: train, eval, replay, validate-config."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import config as config_mod
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError
from .networks import ParameterSet
from .reporting import write_replay
from .trainer import build_net, evaluate, replay_records, train

OUT_ENV = "INTERSECTION_MAPPO_OUT"


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="intersection-mappo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train PPO or MA-PPO for every configured seed")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--algo", choices=("ppo", "mappo"), help="overrides train.algo")
    p.add_argument("--out", help=f"output root (default: ${OUT_ENV}, then run.out_dir)")
    p.add_argument("--seed", type=int, action="append", help="train only this seed (repeatable)")
    p.add_argument("--max-iterations", type=int, help="stop each seed after this many iterations")
    p.add_argument("--resume", action="store_true", help="continue from existing checkpoints")

    p = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("replay", help="export one greedy episode as JSON lines")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("validate-config", help="parse and validate a config file")
    p.add_argument("--config", required=True)
    return parser


def _load_policy(path):
    ckpt = load_checkpoint(path)
    cfg = config_mod.loads(ckpt.config_text)
    params = build_net(cfg).zeros()
    if ckpt.arrays["params"].shape != params.values.shape:
        raise CheckpointError("checkpoint parameters do not match its config's network")
    return cfg, ParameterSet(ckpt.arrays["params"].copy(), params.segments)


def _cmd_train(args) -> int:
    cfg = config_mod.load_config(args.config)
    if args.algo:
        cfg = cfg.replace(train={"algo": args.algo})
    out = Path(args.out or os.environ.get(OUT_ENV) or cfg.run.out_dir)
    results = train(cfg, out, seeds=args.seed, max_iterations=args.max_iterations, resume=args.resume)
    failed = 0
    for r in results:
        last = r.reports[-1] if r.reports else None
        status = f"error: {r.error}" if r.error else "ok"
        summary = f" iterations={last.iteration} reward={last.mean_ep_reward:.3f}" if last else ""
        print(f"seed {r.seed}: {status}{summary} -> {r.out_dir}")
        failed += r.error is not None
    return 1 if failed else 0


def _cmd_eval(args) -> int:
    if args.episodes <= 0:
        raise UsageError("--episodes must be positive")
    cfg, params = _load_policy(args.checkpoint)
    stats = evaluate(cfg, params, args.episodes, args.seed)
    print(f"episodes: {stats['episodes']}")
    print(f"mean_reward: {stats['mean_reward']:.6f}")
    print(f"std_reward: {stats['std_reward']:.6f}")
    print(f"mean_length: {stats['mean_length']:.3f}")
    print(f"collision_rate: {stats['collision_rate']:.6f}")
    return 0


def _cmd_replay(args) -> int:
    cfg, params = _load_policy(args.checkpoint)
    records = replay_records(cfg, params, args.seed)
    write_replay(records, args.out)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def _cmd_validate(args) -> int:
    config_mod.load_config(args.config)
    print(f"{args.config}: ok")
    return 0


COMMANDS = {"train": _cmd_train, "eval": _cmd_eval, "replay": _cmd_replay, "validate-config": _cmd_validate}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, CheckpointError, OSError) as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
