"""Command-line entry point: ``chunkrl <verb> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from chunkrl import curate, scheduler
from chunkrl.env import EnvSpec, serve
from chunkrl.experiment import ConfigError, emit_metrics, evaluate, load_config, run_experiment
from chunkrl.policy import ToyPolicy, load_checkpoint
from chunkrl.resample import ExpertTrajectory, detect_crucial_fork, prefix_success_profile, write_fork_report
from chunkrl.rollout import RolloutContext, teacher_trajectory
from chunkrl.trajectory import read_trajectories

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_EMPTY = 3


def _print(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=1))


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    result = run_experiment(cfg, args.output_dir)
    summary = emit_metrics(result.run_dir)
    _print({"run_dir": str(result.run_dir), "summary": summary})
    return EXIT_OK


def cmd_summarize(args: argparse.Namespace) -> int:
    summary = emit_metrics(args.run_dir)
    _print(summary)
    return EXIT_OK if summary else EXIT_EMPTY


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    policy = load_checkpoint(args.checkpoint)
    if policy.params.shape != (cfg.fmap.feature_dim, cfg.vocab_size):
        raise ConfigError("checkpoint does not match the suite's feature map")
    rates = evaluate(cfg, policy, step=args.seed, n=args.rollouts)
    _print({"test_success_per_task": rates, "test_success": float(np.mean(rates)), "test_success_min": min(rates)})
    return EXIT_OK


def cmd_curate(args: argparse.Namespace) -> int:
    doc = yaml.safe_load(Path(args.suite).read_text(encoding="utf-8")) or {}
    specs = [EnvSpec.from_dict(d) for d in doc.get("tasks", [])]
    band = curate.Band(args.low, args.high)
    records = [
        curate.estimate_difficulty(s, {"uniform": curate.uniform_policy(s)}, args.n, args.seed, band=band) for s in specs
    ]
    curate.write_manifest(args.out, records)
    chosen = curate.select_training_set(records, args.target)
    _print({"bands": [r.difficulty_band.value for r in records], "selected": [r.instance_id for r in chosen]})
    return EXIT_OK


def cmd_schedule_sim(args: argparse.Namespace) -> int:
    doc = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
    cfg = scheduler.SchedulerConfig.from_dict(doc)
    res = scheduler.run_simulation(cfg, args.seed, args.steps)
    if args.events:
        scheduler.write_event_log(args.events, res.events)
    _print(res.metrics())
    return EXIT_OK


def cmd_fork_report(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    fmap = cfg.fmap
    spec = cfg.tasks[args.task]
    policy = (
        load_checkpoint(args.checkpoint)
        if args.checkpoint
        else ToyPolicy.random(fmap.feature_dim, cfg.vocab_size, cfg.seed, cfg.policy_init_scale)
    )
    ctx = RolloutContext(spec, fmap, cfg.tokens_per_turn, task_id=args.task)
    if args.expert:
        expert = ExpertTrajectory(read_trajectories(args.expert)[0])
    else:
        expert = ExpertTrajectory(teacher_trajectory(ctx, policy))
    profile = prefix_success_profile(expert, ctx, policy, args.n, args.seed)
    write_fork_report(args.out, profile)
    fork = detect_crucial_fork(expert, ctx, policy, args.n, args.threshold, args.seed, profile=profile)
    _print({"profile": [{"prefix": p, "success_rate": r} for p, r, _ in profile],
            "crucial_fork": None if fork is None else fork.chunk_index})
    return EXIT_OK


def cmd_env_server(args: argparse.Namespace) -> int:
    serve(sys.stdin, sys.stdout)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chunkrl", description="Chunk-level agentic RL on toy tool environments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("run", help="train from a YAML experiment config")
    s.add_argument("config")
    s.add_argument("--output-dir", default=None)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("summarize", help="aggregate a run directory's metrics")
    s.add_argument("run_dir")
    s.set_defaults(func=cmd_summarize)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a config's task suite")
    s.add_argument("checkpoint")
    s.add_argument("config")
    s.add_argument("--rollouts", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("curate", help="band a task suite by random-policy pass rate")
    s.add_argument("suite", help="YAML file with a 'tasks' list of env specs")
    s.add_argument("--out", default="manifest.jsonl")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--target", type=int, default=100)
    s.add_argument("--low", type=float, default=0.05)
    s.add_argument("--high", type=float, default=0.8)
    s.set_defaults(func=cmd_curate)

    s = sub.add_parser("schedule-sim", help="simulate the rollout/training pipeline")
    s.add_argument("config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--events", default=None, help="write the event log (JSONL) here")
    s.set_defaults(func=cmd_schedule_sim)

    s = sub.add_parser("fork-report", help="prefix success profile of an expert trajectory")
    s.add_argument("config")
    s.add_argument("--task", type=int, default=0)
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--expert", default=None, help="JSONL trajectory file; defaults to the scripted solution")
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--threshold", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="fork_report.jsonl")
    s.set_defaults(func=cmd_fork_report)

    s = sub.add_parser("env-server", help="serve environments over stdin/stdout JSON lines")
    s.set_defaults(func=cmd_env_server)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, scheduler.SchedulerConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
