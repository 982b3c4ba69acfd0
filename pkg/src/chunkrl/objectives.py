"""Off-policy REINFORCE objectives at token and interaction-chunk level.

Every gradient here has the form ``sum_t w_t * grad log pi_theta(a_t | s_t)``
where the per-token weight ``w_t`` bundles reward, importance weight and
mismatch mask. The weights are treated as constants (stop-gradient), so each
gradient is the exact derivative of the matching ``*_objective`` surrogate
when the surrogate's weights are frozen at the same policy.

Conventions
-----------
* Positive trajectories (reward above ``positive_reward_cutoff``) take a
  plain reward-weighted update; non-positive ones take a truncated
  importance weight clipped to ``[clip_low, clip_high]``.
* Importance ratios are geometric means of per-token ratios.
* A chunk's return is ``gamma ** (K - k) * R_final``; the terminal chunk gets
  the undiscounted reward.
* Batch terms are uniform averages over trajectories, accumulated in batch
  order, chunk order, token order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from chunkrl.policy import FeatureMap, ToyPolicy
from chunkrl.trajectory import Chunk, Trajectory, segment_into_chunks


@dataclass(frozen=True)
class RlConfig:
    gamma: float = 0.95
    mismatch_threshold: float = 2.0
    clip_low: float = 0.0
    clip_high: float = 1.0
    lambda_il: float = 1.0
    lambda_rl: float = 1.0
    positive_reward_cutoff: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not self.mismatch_threshold > 0:
            raise ValueError("mismatch_threshold must be positive")
        if self.clip_low > self.clip_high:
            raise ValueError("clip_low must not exceed clip_high")
        if self.lambda_il < 0 or self.lambda_rl < 0:
            raise ValueError("loss coefficients must be non-negative")

    def is_positive(self, reward: float) -> bool:
        return reward > self.positive_reward_cutoff


@dataclass(frozen=True)
class ChunkCredit:
    chunk_index: int
    discounted_return: float
    chunk_is_ratio: float
    chunk_mask: int


class MissingLogprobError(ValueError):
    pass


# -- scalar pieces -------------------------------------------------------------


def geometric_is_ratio(logprobs_new: Sequence[float], logprobs_old: Sequence[float]) -> float:
    new = np.asarray(logprobs_new, dtype=np.float64)
    old = np.asarray(logprobs_old, dtype=np.float64)
    if new.shape != old.shape or new.ndim != 1:
        raise ValueError("log-probability sequences must be 1-D and of equal length")
    if len(new) == 0:
        raise ValueError("importance ratio over an empty span")
    return float(np.exp(np.mean(new - old)))


def clip_ratio(rho: float, low: float = 0.0, high: float = 1.0) -> float:
    return min(max(rho, low), high)


def token_mismatch_mask(trainer_old_logprob: float, sampler_logprob: float, H: float) -> int:
    return int(math.exp(trainer_old_logprob - sampler_logprob) <= H)


def _geo_mask(old: np.ndarray, sampler: np.ndarray, H: float) -> int:
    return int(math.exp(float(np.mean(old - sampler))) <= H)


def chunk_mismatch_mask(chunk: Chunk, traj: Trajectory, H: float) -> int:
    arr = token_arrays(traj)
    s = slice(chunk.start, chunk.stop)
    return _geo_mask(arr.trainer_old[s], arr.sampler[s], H)


def chunk_returns(traj: Trajectory, chunks: Sequence[Chunk], gamma: float) -> list[float]:
    """``G_k = gamma ** (K - k) * R_final``, built backwards by repeated multiplication."""
    out = [0.0] * len(chunks)
    g = float(traj.final_reward)
    for i in range(len(chunks) - 1, -1, -1):
        out[i] = g
        g = gamma * g
    return out


# -- per-trajectory arrays -------------------------------------------------------


@dataclass(frozen=True)
class TokenArrays:
    actions: np.ndarray
    trainer_old: np.ndarray
    sampler: np.ndarray


def token_arrays(traj: Trajectory, require_logprobs: bool = True) -> TokenArrays:
    toks = [tok for turn in traj.turns for tok in turn.tokens]
    actions = np.fromiter((t.id for t in toks), dtype=np.intp, count=len(toks))
    if require_logprobs and any(t.trainer_old_logprob is None or t.sampler_logprob is None for t in toks):
        raise MissingLogprobError("trajectory tokens lack trainer-old or sampler log-probabilities")
    old = np.array([np.nan if t.trainer_old_logprob is None else t.trainer_old_logprob for t in toks])
    samp = np.array([np.nan if t.sampler_logprob is None else t.sampler_logprob for t in toks])
    return TokenArrays(actions, old, samp)


@dataclass
class WeightedTokens:
    """Tokens of one trajectory with their stop-gradient update weights."""

    states: np.ndarray
    actions: np.ndarray
    weights: np.ndarray
    credits: list[ChunkCredit] = field(default_factory=list)


def objective_of(terms: list[WeightedTokens], policy: ToyPolicy, n: int) -> float:
    total = 0.0
    for t in terms:
        if t.weights.any():
            total += float(np.sum(t.weights * policy.token_logprobs(t.states, t.actions)))
    return total / n


def gradient_of(terms: list[WeightedTokens], policy: ToyPolicy, n: int) -> np.ndarray:
    grad = np.zeros_like(policy.params)
    for t in terms:
        if t.weights.any():
            grad += policy.weighted_grad(t.states, t.actions, t.weights)
    return grad / n


# -- token-level baseline --------------------------------------------------------


def baseline_terms(
    traj: Trajectory, ref: ToyPolicy, cfg: RlConfig, fmap: FeatureMap, first_chunk: int = 0
) -> WeightedTokens:
    """Per-token weights of the token-level update.

    Tokens of the first ``first_chunk`` chunks (an expert prefix that was
    replayed, not sampled) are excluded from the update and from the ratio.
    """
    arr = token_arrays(traj)
    states = fmap.token_states(traj)
    start = segment_into_chunks(traj)[first_chunk].start if first_chunk else 0
    mask = (np.exp(arr.trainer_old - arr.sampler) <= cfg.mismatch_threshold).astype(np.float64)
    mask[:start] = 0.0
    R = float(traj.final_reward)
    if cfg.is_positive(R):
        w = R
    else:
        new = ref.token_logprobs(states[start:], arr.actions[start:])
        rho = float(np.exp(np.mean(new - arr.trainer_old[start:])))
        w = clip_ratio(rho, cfg.clip_low, cfg.clip_high) * R
    return WeightedTokens(states, arr.actions, w * mask)


def baseline_objective(
    batch: Sequence[Trajectory], policy: ToyPolicy, cfg: RlConfig, fmap: FeatureMap, reference: ToyPolicy | None = None
) -> float:
    """Surrogate whose gradient at ``reference`` is :func:`baseline_gradient`."""
    ref = policy if reference is None else reference
    return objective_of([baseline_terms(t, ref, cfg, fmap) for t in batch], policy, len(batch))


def baseline_gradient(batch: Sequence[Trajectory], policy: ToyPolicy, cfg: RlConfig, fmap: FeatureMap) -> np.ndarray:
    if not batch:
        return np.zeros_like(policy.params)
    return gradient_of([baseline_terms(t, policy, cfg, fmap) for t in batch], policy, len(batch))


# -- chunk level -----------------------------------------------------------------


def chunk_terms(
    traj: Trajectory,
    ref: ToyPolicy,
    cfg: RlConfig,
    fmap: FeatureMap,
    chunks: Sequence[Chunk] | None = None,
    first_chunk: int = 0,
    scale: float = 1.0,
) -> WeightedTokens:
    """Per-token weights of the chunk-level update.

    Only chunks at 0-based position ``first_chunk`` or later contribute.
    """
    if chunks is None:
        chunks = segment_into_chunks(traj)
    arr = token_arrays(traj)
    states = fmap.token_states(traj)
    positive = cfg.is_positive(float(traj.final_reward))
    new = ref.token_logprobs(states, arr.actions)
    returns = chunk_returns(traj, chunks, cfg.gamma)
    weights = np.zeros(len(states))
    credits = []
    for pos, (c, G) in enumerate(zip(chunks, returns)):
        s = slice(c.start, c.stop)
        rho = float(np.exp(np.mean(new[s] - arr.trainer_old[s])))
        m = _geo_mask(arr.trainer_old[s], arr.sampler[s], cfg.mismatch_threshold)
        credits.append(ChunkCredit(c.index, G, rho, m))
        if pos < first_chunk:
            continue
        w = G * m if positive else clip_ratio(rho, cfg.clip_low, cfg.clip_high) * G * m
        weights[s] = scale * w
    return WeightedTokens(states, arr.actions, weights, credits)


def chunk_credits(traj: Trajectory, policy: ToyPolicy, cfg: RlConfig, fmap: FeatureMap) -> list[ChunkCredit]:
    return chunk_terms(traj, policy, cfg, fmap).credits


def chunk_rl_objective(
    batch: Sequence[Trajectory],
    policy: ToyPolicy,
    cfg: RlConfig,
    fmap: FeatureMap,
    chunks_per_traj: Sequence[Sequence[Chunk]] | None = None,
    reference: ToyPolicy | None = None,
) -> float:
    ref = policy if reference is None else reference
    cpt = chunks_per_traj or [None] * len(batch)
    return objective_of([chunk_terms(t, ref, cfg, fmap, c) for t, c in zip(batch, cpt)], policy, len(batch))


def chunk_rl_gradient(
    batch: Sequence[Trajectory],
    policy: ToyPolicy,
    cfg: RlConfig,
    fmap: FeatureMap,
    chunks_per_traj: Sequence[Sequence[Chunk]] | None = None,
) -> np.ndarray:
    if not batch:
        return np.zeros_like(policy.params)
    cpt = chunks_per_traj or [None] * len(batch)
    return gradient_of([chunk_terms(t, policy, cfg, fmap, c) for t, c in zip(batch, cpt)], policy, len(batch))


# -- hybrid imitation + chunk RL ---------------------------------------------------


@dataclass(frozen=True)
class IpaSample:
    """One resampled trajectory plus the expert chunks it imitates.

    ``resample_from`` counts the leading chunks of ``trajectory`` that were
    replayed from the expert; only later chunks receive the RL update.
    ``imitate_through`` counts the leading expert chunks that receive the
    imitation update (the replayed prefix plus the fork chunk in the usual
    setup, i.e. ``resample_from + 1``).
    """

    trajectory: Trajectory
    expert: Trajectory | None = None
    imitate_through: int = 0
    resample_from: int = 0


def imitation_terms(expert: Trajectory, imitate_through: int, cfg: RlConfig, fmap: FeatureMap, scale: float) -> WeightedTokens:
    chunks = segment_into_chunks(expert)
    if not 0 <= imitate_through <= len(chunks):
        raise ValueError(f"imitate_through={imitate_through} outside 0..{len(chunks)}")
    returns = chunk_returns(expert, chunks, cfg.gamma)
    states = fmap.token_states(expert)
    actions = np.array([tok.id for turn in expert.turns for tok in turn.tokens], dtype=np.intp)
    weights = np.zeros(len(states))
    for c, G in zip(chunks[:imitate_through], returns):
        weights[c.start : c.stop] = scale * G
    return WeightedTokens(states, actions, weights)


def ipa_terms(sample: IpaSample, ref: ToyPolicy, cfg: RlConfig, fmap: FeatureMap) -> list[WeightedTokens]:
    traj = sample.trajectory
    chunks = segment_into_chunks(traj)
    if not 0 <= sample.resample_from < len(chunks):
        raise ValueError("resample_from must index a chunk of the resampled trajectory")
    if sample.expert is not None and sample.resample_from > 0:
        exp_chunks = segment_into_chunks(sample.expert)
        if len(exp_chunks) < sample.resample_from:
            raise ValueError("expert is shorter than the replayed prefix")
        boundary = chunks[sample.resample_from - 1]
        exp_boundary = exp_chunks[sample.resample_from - 1]
        if (
            boundary.turn_stop != exp_boundary.turn_stop
            or traj.action_ids()[: boundary.turn_stop] != sample.expert.action_ids()[: exp_boundary.turn_stop]
        ):
            raise ValueError("resampled trajectory does not continue the expert prefix")
    elif sample.expert is None and sample.imitate_through:
        raise ValueError("imitation requested without an expert trajectory")
    terms = []
    if sample.expert is not None and sample.imitate_through and cfg.lambda_il:
        terms.append(imitation_terms(sample.expert, sample.imitate_through, cfg, fmap, cfg.lambda_il))
    terms.append(chunk_terms(traj, ref, cfg, fmap, chunks, first_chunk=sample.resample_from, scale=cfg.lambda_rl))
    return terms


def ipa_objective(
    samples: Sequence[IpaSample], policy: ToyPolicy, cfg: RlConfig, fmap: FeatureMap, reference: ToyPolicy | None = None
) -> float:
    ref = policy if reference is None else reference
    terms = [t for s in samples for t in ipa_terms(s, ref, cfg, fmap)]
    return objective_of(terms, policy, len(samples))


def ipa_gradient(samples: Sequence[IpaSample], policy: ToyPolicy, cfg: RlConfig, fmap: FeatureMap) -> np.ndarray:
    if not samples:
        return np.zeros_like(policy.params)
    terms = [t for s in samples for t in ipa_terms(s, policy, cfg, fmap)]
    return gradient_of(terms, policy, len(samples))


def ipa_loss_gradient(
    expert: Trajectory | None,
    imitate_through: int,
    resampled: Trajectory,
    resample_from: int,
    policy: ToyPolicy,
    cfg: RlConfig,
    fmap: FeatureMap,
) -> np.ndarray:
    """Single-sample hybrid gradient (see :class:`IpaSample`)."""
    return ipa_gradient([IpaSample(resampled, expert, imitate_through, resample_from)], policy, cfg, fmap)


# -- debugging dump ----------------------------------------------------------------


def write_gradient_dump(
    path: str | Path, grad: np.ndarray, batch: Sequence[Trajectory], policy: ToyPolicy, cfg: RlConfig, fmap: FeatureMap
) -> None:
    credits = []
    for i, traj in enumerate(batch):
        for c in chunk_credits(traj, policy, cfg, fmap):
            credits.append(
                {"trajectory": i, "k": c.chunk_index, "G": c.discounted_return, "rho": c.chunk_is_ratio, "mask": c.chunk_mask}
            )
    doc = {"shape": list(grad.shape), "gradient": grad.tolist(), "credits": credits}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
