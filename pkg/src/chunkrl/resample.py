"""Trajectory filtering and chunk-level initialized resampling.

Resampling replays the first chunks of a successful expert trajectory and
lets the policy continue from there. Comparing success rates between
neighbouring prefixes exposes crucial forks; the rollback schedule and the
parallel anchor batch both build on that.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from chunkrl.policy import ToyPolicy
from chunkrl.rollout import PrefixReplayError, RolloutContext, rollout_batch
from chunkrl.trajectory import Chunk, FilterReason, Trajectory, segment_into_chunks

REJECT_REASONS = frozenset(
    {FilterReason.API_FAILURE, FilterReason.NONDETERMINISTIC_TOOL, FilterReason.ILLEGAL_TOOL_REPEAT}
)


@dataclass(frozen=True)
class FilterDecision:
    accepted: bool
    reason: FilterReason = FilterReason.NONE


def filter_trajectory(traj: Trajectory) -> FilterDecision:
    if traj.filtered_reason in REJECT_REASONS:
        return FilterDecision(False, traj.filtered_reason)
    return FilterDecision(True)


@dataclass
class BatchStats:
    rejected: int = 0
    dropped_slots: int = 0


def assemble_batch(
    initial: Sequence[Trajectory],
    resample: Callable[[int, int], Trajectory],
    retry_budget: int = 8,
) -> tuple[list[Trajectory], BatchStats]:
    """Filter ``initial`` and refill every rejected slot on the fly.

    ``resample(slot, attempt)`` draws a fresh rollout for ``slot`` from the
    same initial state. A slot whose retries are all rejected is dropped.
    Accepted trajectories keep slot order.
    """
    stats = BatchStats()
    out = []
    for slot, traj in enumerate(initial):
        attempt = 0
        while not filter_trajectory(traj).accepted:
            stats.rejected += 1
            if attempt >= retry_budget:
                traj = None
                break
            traj = resample(slot, attempt)
            attempt += 1
        if traj is None:
            stats.dropped_slots += 1
        else:
            out.append(traj)
    return out, stats


@dataclass(frozen=True)
class ExpertTrajectory:
    base: Trajectory
    refresh_version: int = 0

    def __post_init__(self) -> None:
        if not self.base.final_reward > 0:
            raise ValueError("an expert trajectory must be successful")

    @property
    def chunks(self) -> list[Chunk]:
        return segment_into_chunks(self.base)

    @property
    def num_chunks(self) -> int:
        return len(self.chunks)


@dataclass(frozen=True)
class ForkEstimate:
    chunk_index: int  # 1-based f
    success_rate_before: float
    success_rate_after: float
    sample_count: int


def _success_rate(trajs: Sequence[Trajectory]) -> float:
    return sum(t.final_reward > 0 for t in trajs) / len(trajs) if trajs else 0.0


def resample_from_prefix(
    expert: ExpertTrajectory,
    prefix_chunks: int,
    ctx: RolloutContext,
    policy: ToyPolicy,
    n: int,
    seed: int | np.random.Generator,
) -> tuple[list[Trajectory], float]:
    if not 0 <= prefix_chunks < expert.num_chunks:
        raise ValueError(f"prefix_chunks must lie in 0..{expert.num_chunks - 1}")
    if prefix_chunks and not ctx.spec.deterministic:
        raise PrefixReplayError("environment is not deterministic; refusing prefix replay")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    trajs = rollout_batch(ctx, policy, n, rng, expert.base, prefix_chunks)
    return trajs, _success_rate(trajs)


def prefix_success_profile(
    expert: ExpertTrajectory, ctx: RolloutContext, policy: ToyPolicy, n_per_prefix: int, seed: int
) -> list[tuple[int, float, int]]:
    """(prefix length, success rate, sample count) for prefixes 0..K.

    Prefix K replays the whole expert once; with a deterministic environment
    its rate is the expert's own reward.
    """
    K = expert.num_chunks
    out = []
    for p in range(K):
        _, rate = resample_from_prefix(expert, p, ctx, policy, n_per_prefix, np.random.default_rng([seed, p]))
        out.append((p, rate, n_per_prefix))
    out.append((K, float(expert.base.final_reward > 0), 1))
    return out


def detect_crucial_fork(
    expert: ExpertTrajectory,
    ctx: RolloutContext,
    policy: ToyPolicy,
    n_per_prefix: int,
    drop_threshold: float,
    seed: int,
    profile: Sequence[tuple[int, float, int]] | None = None,
) -> ForkEstimate | None:
    """Latest chunk f whose inclusion in the prefix lifts success by at least
    ``drop_threshold``. A zero lift never counts, even at threshold 0."""
    if n_per_prefix < 1:
        raise ValueError("n_per_prefix must be at least 1")
    if profile is None:
        profile = prefix_success_profile(expert, ctx, policy, n_per_prefix, seed)
    rates = [r for _, r, _ in profile]
    for f in range(len(rates) - 1, 0, -1):
        lift = rates[f] - rates[f - 1]
        if lift > 0 and lift >= drop_threshold:
            return ForkEstimate(f, rates[f - 1], rates[f], n_per_prefix)
    return None


class SequentialRollback:
    """Start at the last expert prefix and back off one chunk at each mastery."""

    def __init__(self, num_chunks: int, mastery_threshold: float):
        if not 0.0 < mastery_threshold <= 1.0:
            raise ValueError("mastery_threshold must lie in (0, 1]")
        self.mastery_threshold = mastery_threshold
        self.prefix = num_chunks - 1
        self.finished = False

    def observe(self, success_rate: float) -> int:
        """Record the success rate from the current prefix; return the next prefix."""
        if success_rate >= self.mastery_threshold:
            if self.prefix == 0:
                self.finished = True
            else:
                self.prefix -= 1
        return self.prefix


def sequential_rollback_schedule(
    expert: ExpertTrajectory,
    ctx: RolloutContext,
    policy_stream: Iterable[ToyPolicy],
    mastery_threshold: float,
    n_eval: int = 32,
    seed: int = 0,
) -> Iterator[int]:
    """Yield the prefix in use for each policy in ``policy_stream``.

    Stops once prefix 0 is mastered or the stream runs out.
    """
    sched = SequentialRollback(expert.num_chunks, mastery_threshold)
    for step, policy in enumerate(policy_stream):
        p = sched.prefix
        yield p
        _, rate = resample_from_prefix(expert, p, ctx, policy, n_eval, np.random.default_rng([seed, step]))
        sched.observe(rate)
        if sched.finished:
            return


def place_anchors(
    num_chunks: int, anchor_count: int, placement: str | Sequence[int] = "uniform", seed: int = 0
) -> list[int]:
    """Prefix lengths for parallel initialisation.

    ``uniform`` centres ``anchor_count`` anchors in equal slices of 0..K-1:
    ``floor((i + 1/2) * K / anchor_count)``. ``random`` draws distinct
    prefixes with ``seed``. A sequence is taken as explicit prefixes.
    """
    if not 1 <= anchor_count <= num_chunks:
        raise ValueError("anchor_count must lie in 1..K")
    if isinstance(placement, str):
        if placement == "uniform":
            return [((2 * i + 1) * num_chunks) // (2 * anchor_count) for i in range(anchor_count)]
        if placement == "random":
            rng = np.random.default_rng(seed)
            return sorted(int(p) for p in rng.choice(num_chunks, size=anchor_count, replace=False))
        raise ValueError(f"unknown placement {placement!r}")
    anchors = [int(p) for p in placement]
    if len(anchors) != anchor_count or any(not 0 <= p < num_chunks for p in anchors):
        raise ValueError("explicit anchors must be anchor_count prefixes in 0..K-1")
    return anchors


def parallel_init_batch(
    expert: ExpertTrajectory,
    anchor_count: int,
    placement: str | Sequence[int],
    rollouts_per_anchor: int,
    ctx: RolloutContext,
    policy: ToyPolicy,
    seed: int | np.random.Generator = 0,
    placement_seed: int = 0,
) -> list[Trajectory]:
    """Rollouts from several expert prefixes, ordered by (anchor, rollout)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    batch = []
    for p in place_anchors(expert.num_chunks, anchor_count, placement, placement_seed):
        batch.extend(rollout_batch(ctx, policy, rollouts_per_anchor, rng, expert.base, p))
    return batch


def write_fork_report(path: str | Path, profile: Sequence[tuple[int, float, int]]) -> None:
    stamp = time.strftime("%Y-%m-%dT%H:%M:%S")
    with open(path, "w", encoding="utf-8") as fh:
        for p, rate, n in profile:
            fh.write(json.dumps({"prefix": p, "success_rate": rate, "sample_count": n, "timestamp": stamp}) + "\n")
