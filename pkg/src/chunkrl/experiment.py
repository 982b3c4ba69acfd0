"""Reproducible training runs on toy tool environments.

A run alternates rollout (optionally from expert prefixes), filtering with
on-the-fly resampling, one gradient-ascent update and periodic evaluation
from the initial state. Every random draw comes from a generator keyed by
``(seed, step, purpose, task)``, so evaluation never perturbs training and a
rerun with the same config writes byte-identical metric files.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from chunkrl.env import EnvSpec
from chunkrl.objectives import (
    IpaSample,
    RlConfig,
    WeightedTokens,
    gradient_of,
    ipa_terms,
    baseline_terms,
    chunk_terms,
)
from chunkrl.policy import FeatureMap, ToyPolicy, save_checkpoint
from chunkrl.resample import ExpertTrajectory, SequentialRollback, assemble_batch, place_anchors
from chunkrl.rollout import RolloutContext, find_expert, rollout_batch, teacher_trajectory
from chunkrl.sft import AllRelevant, SftMaskConfig, ToolProximity, sft_loss_grad
from chunkrl.trajectory import Trajectory

log = logging.getLogger(__name__)

OBJECTIVES = ("masked_sft", "baseline_rl", "chunk_rl", "ipa")
STRATEGIES = ("none", "sequential_rollback", "parallel_init")

# stream tags for np.random.default_rng([seed, step, tag, task])
_ROLLOUT, _REFILL, _EVAL, _EXPERT = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ResamplingConfig:
    strategy: str = "none"
    mastery_threshold: float = 0.8
    anchor_count: int = 1
    placement: str | tuple[int, ...] = "uniform"
    expert_source: str = "self"  # "self": sample until success; "teacher": scripted solution
    expert_search_budget: int = 20000
    expert_refresh_every: int = 0  # 0: keep the first expert found


@dataclass(frozen=True)
class EngineConfig:
    perturbation_scale: float = 0.0
    rounding_bits: int | None = None
    jitter_scale: float = 0.0  # part of the drift redrawn at every policy version


@dataclass(frozen=True)
class ExperimentConfig:
    tasks: tuple[EnvSpec, ...]
    seed: int = 0
    tokens_per_turn: int = 4
    policy_init_scale: float = 0.1
    learning_rate: float = 1.0
    objective: str = "chunk_rl"
    rl: RlConfig = RlConfig()
    resampling: ResamplingConfig = ResamplingConfig()
    engine: EngineConfig = EngineConfig()
    sft_epsilon: float = 1e-8
    sft_relevance: str = "all_relevant"
    batch_size: int = 16  # rollouts per task per step
    steps: int = 100
    eval_every: int = 10
    eval_rollouts: int = 64
    policy_lag: int = 0
    retry_budget: int = 8
    output_dir: str = "runs/default"

    def validate(self) -> None:
        if not self.tasks:
            raise ConfigError("at least one task is required")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        if self.resampling.strategy not in STRATEGIES:
            raise ConfigError(f"resampling strategy must be one of {STRATEGIES}")
        if self.steps < 0 or self.batch_size < 1 or self.eval_rollouts < 1 or self.eval_every < 1:
            raise ConfigError("budgets must be positive (steps may be 0)")
        if self.tokens_per_turn < 1 or self.policy_lag < 0 or self.retry_budget < 0:
            raise ConfigError("tokens_per_turn >= 1, policy_lag >= 0, retry_budget >= 0")
        vocab = {t.vocab_size for t in self.tasks}
        if len(vocab) != 1:
            raise ConfigError("all tasks must share one action vocabulary")
        if self.resampling.strategy == "parallel_init":
            k_min = min(t.chunk_count for t in self.tasks)
            if not 1 <= self.resampling.anchor_count <= k_min:
                raise ConfigError("anchor_count must lie in 1..K for every task")
        if self.resampling.expert_source not in ("self", "teacher"):
            raise ConfigError("expert_source must be self or teacher")
        if not 0 < self.resampling.mastery_threshold <= 1:
            raise ConfigError("mastery_threshold must lie in (0, 1]")
        if self.sft_relevance not in ("all_relevant",) and not self.sft_relevance.startswith("tool_proximity"):
            raise ConfigError("sft_relevance must be all_relevant or tool_proximity:<window>")

    @property
    def fmap(self) -> FeatureMap:
        return FeatureMap(
            max_turns=max(t.chunk_count for t in self.tasks),
            tokens_per_turn=self.tokens_per_turn,
            n_tasks=len(self.tasks),
        )

    @property
    def vocab_size(self) -> int:
        return self.tasks[0].vocab_size

    def to_dict(self) -> dict[str, Any]:
        d = {
            f.name: getattr(self, f.name)
            for f in dataclasses.fields(self)
            if f.name not in ("tasks", "rl", "resampling", "engine")
        }
        d["tasks"] = [t.to_dict() for t in self.tasks]
        d["rl"] = dataclasses.asdict(self.rl)
        r = dataclasses.asdict(self.resampling)
        if not isinstance(r["placement"], str):
            r["placement"] = list(r["placement"])
        d["resampling"] = r
        d["engine"] = dataclasses.asdict(self.engine)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            d["tasks"] = tuple(EnvSpec.from_dict(t) for t in d.get("tasks", ()))
            d["rl"] = RlConfig(**(d.get("rl") or {}))
            r = dict(d.get("resampling") or {})
            if "placement" in r and not isinstance(r["placement"], str):
                r["placement"] = tuple(r["placement"])
            d["resampling"] = ResamplingConfig(**r)
            d["engine"] = EngineConfig(**(d.get("engine") or {}))
            cfg = cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    def replace(self, **changes: Any) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def load_config(path: str | Path, env: Mapping[str, str] | None = None) -> ExperimentConfig:
    """Read a YAML config; ``CHUNKRL_OUTPUT_DIR`` and ``CHUNKRL_SEED`` override."""
    env = os.environ if env is None else env
    d = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    if "CHUNKRL_OUTPUT_DIR" in env:
        d["output_dir"] = env["CHUNKRL_OUTPUT_DIR"]
    if "CHUNKRL_SEED" in env:
        d["seed"] = int(env["CHUNKRL_SEED"])
    return ExperimentConfig.from_dict(d)


# -- training loop -------------------------------------------------------------------


@dataclass
class TaskState:
    ctx: RolloutContext
    expert: ExpertTrajectory | None = None
    rollback: SequentialRollback | None = None
    expert_rollouts: int = 0


@dataclass
class RunResult:
    run_dir: Path
    policy: ToyPolicy
    records: list[dict[str, Any]] = field(default_factory=list)


def _rng(cfg: ExperimentConfig, step: int, tag: int, task: int, extra: int = 0) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, step, tag, task, extra])


def _sft_config(cfg: ExperimentConfig) -> SftMaskConfig:
    if cfg.sft_relevance.startswith("tool_proximity"):
        _, _, w = cfg.sft_relevance.partition(":")
        return SftMaskConfig(cfg.sft_epsilon, ToolProximity(int(w or 1)))
    return SftMaskConfig(cfg.sft_epsilon, AllRelevant())


def evaluate(cfg: ExperimentConfig, policy: ToyPolicy, step: int, n: int | None = None) -> list[float]:
    """Success rate from the initial state per task, sampled from the trainer policy."""
    fmap = cfg.fmap
    rates = []
    for i, spec in enumerate(cfg.tasks):
        ctx = RolloutContext(spec, fmap, cfg.tokens_per_turn, task_id=i)
        trajs = rollout_batch(ctx, policy, n or cfg.eval_rollouts, _rng(cfg, step, _EVAL, i))
        rates.append(sum(t.final_reward > 0 for t in trajs) / len(trajs))
    return rates


def _acquire_expert(cfg: ExperimentConfig, ts: TaskState, policy: ToyPolicy, step: int, task: int) -> None:
    r = cfg.resampling
    due = ts.expert is None or (r.expert_refresh_every and step % r.expert_refresh_every == 0)
    if not due:
        return
    if r.expert_source == "teacher":
        traj = teacher_trajectory(ts.ctx, policy, seed=cfg.seed)
        traj = traj if traj.final_reward > 0 else None
    else:
        traj, spent = find_expert(ts.ctx, policy, _rng(cfg, step, _EXPERT, task), max_rollouts=r.expert_search_budget)
        ts.expert_rollouts += spent
    if traj is not None:
        ts.expert = ExpertTrajectory(traj, refresh_version=policy.version)
        if r.strategy == "sequential_rollback" and ts.rollback is None:
            ts.rollback = SequentialRollback(ts.expert.num_chunks, r.mastery_threshold)
        log.debug("task %d: expert acquired at step %d", task, step)


def _prefixes(cfg: ExperimentConfig, ts: TaskState, task: int) -> list[int]:
    """Prefix length of every rollout slot for one task this step."""
    r = cfg.resampling
    n = cfg.batch_size
    if ts.expert is None or r.strategy == "none":
        return [0] * n
    if r.strategy == "sequential_rollback":
        return [ts.rollback.prefix] * n
    anchors = place_anchors(ts.expert.num_chunks, r.anchor_count, r.placement, seed=cfg.seed + task)
    per, extra = divmod(n, len(anchors))
    out = []
    for j, p in enumerate(anchors):
        out.extend([p] * (per + (j < extra)))
    return out


def _collect(
    cfg: ExperimentConfig, ts: TaskState, policy: ToyPolicy, gen: ToyPolicy, step: int, task: int
) -> tuple[list[Trajectory], list[int], int, int]:
    prefixes = _prefixes(cfg, ts, task)
    expert = ts.expert.base if ts.expert is not None else None
    rng = _rng(cfg, step, _ROLLOUT, task)
    initial: list[Trajectory] = []
    for p in sorted(set(prefixes), key=prefixes.index):
        count = prefixes.count(p)
        initial.extend(rollout_batch(ts.ctx, policy, count, rng, expert if p else None, p, old_policy=gen))

    def refill(slot: int, attempt: int) -> Trajectory:
        p = prefixes[slot]
        r = _rng(cfg, step, _REFILL, task, slot * 1000 + attempt)
        return rollout_batch(ts.ctx, policy, 1, r, expert if p else None, p, old_policy=gen)[0]

    batch, stats = assemble_batch(initial, refill, cfg.retry_budget)
    return batch, prefixes, stats.rejected, stats.dropped_slots


def _update_direction(
    cfg: ExperimentConfig, batch: list[tuple[Trajectory, TaskState]], policy: ToyPolicy
) -> np.ndarray:
    fmap = cfg.fmap
    n = len(batch)
    if n == 0:
        return np.zeros_like(policy.params)
    if cfg.objective == "masked_sft":
        sft = _sft_config(cfg)
        grad = np.zeros_like(policy.params)
        for traj, _ in batch:
            if cfg.rl.is_positive(traj.final_reward):
                grad -= sft_loss_grad(traj, policy, sft, fmap)
        return grad / n
    terms: list[WeightedTokens] = []
    for traj, ts in batch:
        p = traj.prefix_chunks
        if cfg.objective == "baseline_rl":
            terms.append(baseline_terms(traj, policy, cfg.rl, fmap, first_chunk=p))
        elif cfg.objective == "chunk_rl":
            terms.append(chunk_terms(traj, policy, cfg.rl, fmap, first_chunk=p))
        else:
            # the fork chunk right after the replayed prefix is imitated too
            if ts.expert is None:
                sample = IpaSample(traj)
            else:
                sample = IpaSample(traj, ts.expert.base, min(p + 1, ts.expert.num_chunks), p)
            terms.extend(ipa_terms(sample, policy, cfg.rl, fmap))
    return gradient_of(terms, policy, n)


def run_experiment(cfg: ExperimentConfig, run_dir: str | Path | None = None) -> RunResult:
    cfg.validate()
    run_dir = Path(run_dir or cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")
    metrics_path = run_dir / "metrics.jsonl"
    metrics_path.write_text("", encoding="utf-8")

    fmap = cfg.fmap
    policy = ToyPolicy.random(fmap.feature_dim, cfg.vocab_size, cfg.seed, cfg.policy_init_scale)
    history = [policy]
    tasks = [
        TaskState(
            RolloutContext(
                spec,
                fmap,
                cfg.tokens_per_turn,
                task_id=i,
                perturbation_scale=cfg.engine.perturbation_scale,
                rounding_bits=cfg.engine.rounding_bits,
                perturbation_seed=cfg.seed * 7919 + i,
                jitter_scale=cfg.engine.jitter_scale,
            )
        )
        for i, spec in enumerate(cfg.tasks)
    ]
    records: list[dict[str, Any]] = []
    needs_expert = cfg.resampling.strategy != "none"

    with open(metrics_path, "a", encoding="utf-8") as fh:
        for step in range(cfg.steps):
            gen = history[max(0, len(history) - 1 - cfg.policy_lag)]
            batch: list[tuple[Trajectory, TaskState]] = []
            per_task_success, prefixes_used = [], []
            rejected = dropped = 0
            for i, ts in enumerate(tasks):
                if needs_expert:
                    _acquire_expert(cfg, ts, gen, step, i)
                trajs, prefixes, rej, drop = _collect(cfg, ts, policy, gen, step, i)
                rejected += rej
                dropped += drop
                rate = sum(t.final_reward > 0 for t in trajs) / len(trajs) if trajs else 0.0
                per_task_success.append(rate)
                prefixes_used.append(sorted(set(prefixes)))
                if ts.rollback is not None:
                    ts.rollback.observe(rate)
                batch.extend((t, ts) for t in trajs)

            grad = _update_direction(cfg, batch, policy)
            policy = policy.updated(cfg.learning_rate * grad)
            history.append(policy)
            if len(history) > cfg.policy_lag + 1:
                history.pop(0)

            rec: dict[str, Any] = {
                "step": step,
                "train_success": float(np.mean([t.final_reward > 0 for t, _ in batch])) if batch else 0.0,
                "train_success_per_task": per_task_success,
                "grad_norm": float(np.linalg.norm(grad)),
                "prefixes": prefixes_used,
                "rejected": rejected,
                "dropped_slots": dropped,
                "expert_rollouts": [ts.expert_rollouts for ts in tasks],
            }
            if (step + 1) % cfg.eval_every == 0 or step == cfg.steps - 1:
                rates = evaluate(cfg, policy, step)
                rec["test_success_per_task"] = rates
                rec["test_success"] = float(np.mean(rates))
                rec["test_success_min"] = float(min(rates))
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            records.append(rec)

    save_checkpoint(policy, run_dir / "policy.json")
    return RunResult(run_dir, policy, records)


# -- summaries -----------------------------------------------------------------------


def read_metrics(run_dir: str | Path) -> list[dict[str, Any]]:
    path = Path(run_dir) / "metrics.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no metrics file in {run_dir}")
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def summarize(records: list[dict[str, Any]]) -> dict[str, Any]:
    if not records:
        return {}
    tests = [r["test_success"] for r in records if "test_success" in r]
    norms = np.array([r["grad_norm"] for r in records])
    out: dict[str, Any] = {
        "steps": len(records),
        "mean_train_success": float(np.mean([r["train_success"] for r in records])),
        "grad_norm_mean": float(norms.mean()),
        "grad_norm_variance": float(norms.var()),
        "rejected": int(sum(r["rejected"] for r in records)),
    }
    if tests:
        out["mean_test_success"] = float(np.mean(tests))
        out["max_test_success"] = float(np.max(tests))
        out["final_test_success"] = float(tests[-1])
    return out


def emit_metrics(run_dir: str | Path) -> dict[str, Any]:
    summary = summarize(read_metrics(run_dir))
    Path(run_dir, "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return summary


def first_crossing(records: list[dict[str, Any]], key: str, threshold: float) -> int | None:
    for r in records:
        if key in r and r[key] >= threshold:
            return r["step"]
    return None


# -- calibrated presets --------------------------------------------------------------


def planted_fork_suite() -> tuple[EnvSpec, ...]:
    """Five chunks, two forks with one correct action in four."""
    return (EnvSpec(5, 4, {2: {0}, 4: {1}}, name="planted-fork"),)


def deep_fork_task() -> tuple[EnvSpec, ...]:
    """Eight chunks, four forks over eight actions: (1/8)**4 from the start."""
    return (EnvSpec(8, 8, {2: {1}, 4: {2}, 6: {3}, 8: {4}}, name="deep-fork"),)


def ablation_suite() -> tuple[EnvSpec, ...]:
    return (
        EnvSpec(4, 8, {3: {1}}, name="easy"),
        EnvSpec(6, 8, {2: {2}, 5: {3}}, name="medium"),
        EnvSpec(8, 8, {2: {1}, 4: {2}, 6: {3}, 8: {4}}, name="hard"),
    )


def preset(name: str, seed: int = 0, output_dir: str = "runs/preset", **overrides: Any) -> ExperimentConfig:
    """Configs behind the qualitative training-dynamics checks.

    ``chunk_vs_token``: mismatched sampler (fixed drift plus per-version
    jitter), compare ``objective`` chunk_rl against baseline_rl.
    ``rollback``: sequential rollback on the deep-fork task versus
    ``strategy="none"``. ``ablation``: hybrid objective with and without
    parallel initialisation on a three-task suite.
    """
    if name == "chunk_vs_token":
        cfg = ExperimentConfig(
            tasks=planted_fork_suite(),
            seed=seed,
            tokens_per_turn=4,
            learning_rate=3.0,
            objective="chunk_rl",
            rl=RlConfig(gamma=0.99, mismatch_threshold=1.3),
            engine=EngineConfig(perturbation_scale=1.0, jitter_scale=1.0),
            batch_size=16,
            steps=200,
            eval_every=50,
            eval_rollouts=32,
            output_dir=output_dir,
        )
    elif name == "rollback":
        cfg = ExperimentConfig(
            tasks=deep_fork_task(),
            seed=seed,
            tokens_per_turn=2,
            learning_rate=3.0,
            objective="chunk_rl",
            resampling=ResamplingConfig("sequential_rollback", mastery_threshold=0.8),
            batch_size=16,
            steps=100,
            eval_every=25,
            eval_rollouts=64,
            output_dir=output_dir,
        )
    elif name == "ablation":
        cfg = ExperimentConfig(
            tasks=ablation_suite(),
            seed=seed,
            tokens_per_turn=2,
            learning_rate=3.0,
            objective="ipa",
            resampling=ResamplingConfig("parallel_init", anchor_count=4),
            batch_size=16,
            steps=100,
            eval_every=25,
            eval_rollouts=64,
            output_dir=output_dir,
        )
    else:
        raise ConfigError(f"unknown preset {name!r}")
    if "strategy" in overrides:
        cfg = cfg.replace(resampling=dataclasses.replace(cfg.resampling, strategy=overrides.pop("strategy")))
    cfg = cfg.replace(**overrides)
    cfg.validate()
    return cfg
