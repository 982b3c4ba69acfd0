"""Collect trajectories by driving a policy through a :class:`ToolEnv`.

Token sampling is vectorised across a batch: the state of a token depends
only on (task, turn, position), so one table of sampler probabilities covers
every rollout of the batch. Environment stepping stays per-instance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from chunkrl.env import EnvError, EnvSpec, ToolEnv
from chunkrl.policy import FeatureMap, SamplerVariant, ToyPolicy, sample_tokens
from chunkrl.trajectory import FilterReason, Token, Trajectory, Turn, segment_into_chunks


class PrefixReplayError(EnvError):
    """The environment cannot reproduce a recorded prefix."""


@dataclass(frozen=True)
class RolloutContext:
    """Everything needed to roll a policy out on one task."""

    spec: EnvSpec
    fmap: FeatureMap
    tokens_per_turn: int
    task_id: int = 0
    perturbation_scale: float = 0.0
    rounding_bits: int | None = None
    perturbation_seed: int = 0
    jitter_scale: float = 0.0

    def sampler(self, policy: ToyPolicy) -> SamplerVariant:
        return SamplerVariant(
            policy, self.perturbation_scale, self.rounding_bits, self.perturbation_seed, self.jitter_scale
        )

    def states(self) -> np.ndarray:
        """State indices laid out as (turn, position)."""
        K, L = self.spec.chunk_count, self.tokens_per_turn
        return np.array(
            [[self.fmap.state_index(self.task_id, k, j) for j in range(L)] for k in range(K)], dtype=np.intp
        )


def prefix_turns(expert: Trajectory, prefix_chunks: int) -> int:
    if prefix_chunks == 0:
        return 0
    chunks = segment_into_chunks(expert)
    if not 0 <= prefix_chunks <= len(chunks):
        raise ValueError(f"prefix of {prefix_chunks} chunks exceeds expert length {len(chunks)}")
    return chunks[prefix_chunks - 1].turn_stop


def rollout_batch(
    ctx: RolloutContext,
    policy: ToyPolicy,
    n: int,
    rng: np.random.Generator,
    expert: Trajectory | None = None,
    prefix_chunks: int = 0,
    old_policy: ToyPolicy | None = None,
) -> list[Trajectory]:
    """Sample ``n`` trajectories, replaying ``prefix_chunks`` expert chunks first.

    ``old_policy`` is the trainer snapshot that generated the samples (the
    sampler wraps it); ``policy`` defaults to it and fills ``trainer_logprob``.
    """
    gen = old_policy if old_policy is not None else policy
    sampler = ctx.sampler(gen)
    spec = ctx.spec
    K, L = spec.chunk_count, ctx.tokens_per_turn
    n_prefix = prefix_turns(expert, prefix_chunks) if expert is not None and prefix_chunks else 0
    if n_prefix and not spec.deterministic:
        raise PrefixReplayError("prefix replay needs a deterministic environment")

    states = ctx.states()
    flat = states.ravel()
    samp_lp = sampler.state_log_probs(flat).reshape(K, L, -1)
    old_lp = gen.state_log_probs(flat).reshape(K, L, -1)
    new_lp = old_lp if gen is policy else policy.state_log_probs(flat).reshape(K, L, -1)

    seeds = rng.integers(0, 2**63 - 1, size=n)
    u = rng.random((n, K, L))
    drawn = sample_tokens(samp_lp[None, :, :, :], u)  # (n, K, L)

    out = []
    for i in range(n):
        env = ToolEnv(spec, f"rollout-{i}")
        env.reset(int(seeds[i]))
        turns = []
        reward = 0.0
        info: dict = {}
        for k in range(K):
            if k < n_prefix:
                ids = [tok.id for tok in expert.turns[k].tokens]
            else:
                ids = drawn[i, k].tolist()
            res = env.step(ids)
            if k < n_prefix and res.observation != expert.turns[k].observation:
                raise PrefixReplayError(f"replayed turn {k} produced a different observation")
            toks = tuple(
                Token(
                    id=a,
                    trainer_logprob=float(new_lp[k, min(j, L - 1), a]),
                    trainer_old_logprob=float(old_lp[k, min(j, L - 1), a]),
                    sampler_logprob=float(samp_lp[k, min(j, L - 1), a]),
                )
                for j, a in enumerate(ids)
            )
            turns.append(Turn(toks, ends_with_tool_call=True, error_flag=res.error_flag, observation=res.observation))
            info = res.info
            if res.terminated:
                reward = float(res.reward)
                break
        out.append(
            Trajectory(
                turns=tuple(turns),
                final_reward=reward,
                policy_version=gen.version,
                filtered_reason=FilterReason(info.get("filtered_reason", "none")),
                task_id=ctx.task_id,
                prefix_chunks=prefix_chunks if expert is not None else 0,
            )
        )
    return out


def teacher_trajectory(ctx: RolloutContext, policy: ToyPolicy, seed: int = 0) -> Trajectory:
    """A scripted demonstration: every token of turn k is the task's solution action.

    Log-probabilities are recorded under ``policy`` and its sampler so the
    trajectory can be replayed and imitated like a sampled one.
    """
    spec = ctx.spec
    L = ctx.tokens_per_turn
    states = ctx.states()
    flat = states.ravel()
    lp = policy.state_log_probs(flat).reshape(spec.chunk_count, L, -1)
    samp_lp = ctx.sampler(policy).state_log_probs(flat).reshape(spec.chunk_count, L, -1)
    env = ToolEnv(spec, "teacher")
    env.reset(seed)
    turns = []
    reward = 0.0
    info: dict = {}
    for k, a in enumerate(spec.solution()):
        res = env.step([a] * L)
        toks = tuple(
            Token(id=a, trainer_logprob=float(lp[k, j, a]), trainer_old_logprob=float(lp[k, j, a]),
                  sampler_logprob=float(samp_lp[k, j, a]))
            for j in range(L)
        )
        turns.append(Turn(toks, ends_with_tool_call=True, error_flag=res.error_flag, observation=res.observation))
        info = res.info
        if res.terminated:
            reward = float(res.reward)
            break
    return Trajectory(
        turns=tuple(turns),
        final_reward=reward,
        policy_version=policy.version,
        filtered_reason=FilterReason(info.get("filtered_reason", "none")),
        task_id=ctx.task_id,
    )


def find_expert(
    ctx: RolloutContext,
    policy: ToyPolicy,
    rng: np.random.Generator,
    max_rollouts: int = 20000,
    batch: int = 512,
    cutoff: float = 0.0,
) -> tuple[Trajectory | None, int]:
    """Self-sample until the first successful, unfiltered trajectory.

    Returns the trajectory (or None) and the number of rollouts spent.
    """
    spent = 0
    while spent < max_rollouts:
        m = min(batch, max_rollouts - spent)
        for traj in rollout_batch(ctx, policy, m, rng):
            spent += 1
            if traj.final_reward > cutoff and traj.filtered_reason is FilterReason.NONE:
                return traj, spent
    return None, spent
