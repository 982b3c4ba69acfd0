"""Pass-rate difficulty estimation and training-set selection."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from chunkrl.env import EnvSpec
from chunkrl.policy import FeatureMap, ToyPolicy
from chunkrl.rollout import RolloutContext, rollout_batch


class DifficultyBand(str, enum.Enum):
    TRIVIAL = "trivial"
    MODERATE = "moderate"
    IMPOSSIBLE = "impossible"
    UNRELIABLE = "unreliable"


@dataclass(frozen=True)
class Band:
    low: float = 0.05
    high: float = 0.8

    def __post_init__(self) -> None:
        if not 0.0 <= self.low < self.high <= 1.0:
            raise ValueError("band needs 0 <= low < high <= 1")

    def classify(self, mean_rate: float, deterministic: bool) -> DifficultyBand:
        if not deterministic:
            return DifficultyBand.UNRELIABLE
        if mean_rate >= self.high:
            return DifficultyBand.TRIVIAL
        if mean_rate > self.low:
            return DifficultyBand.MODERATE
        return DifficultyBand.IMPOSSIBLE


@dataclass(frozen=True)
class InstanceRecord:
    env_spec: EnvSpec
    pass_rates: Mapping[str, float]
    difficulty_band: DifficultyBand
    rollouts_per_evaluator: int = 0

    def __post_init__(self) -> None:
        if any(not 0.0 <= r <= 1.0 for r in self.pass_rates.values()):
            raise ValueError("pass rates must lie in [0, 1]")

    @property
    def mean_pass_rate(self) -> float:
        return float(np.mean(list(self.pass_rates.values()))) if self.pass_rates else 0.0

    @property
    def instance_id(self) -> str:
        return self.env_spec.digest()

    def to_dict(self) -> dict:
        return {
            "id": self.instance_id,
            "name": self.env_spec.name,
            "band": self.difficulty_band.value,
            "pass_rates": dict(sorted(self.pass_rates.items())),
            "mean_pass_rate": self.mean_pass_rate,
            "rollouts_per_evaluator": self.rollouts_per_evaluator,
            "spec": self.env_spec.to_dict(),
        }


def uniform_policy(spec: EnvSpec, tokens_per_turn: int = 1) -> ToyPolicy:
    """The random evaluator: zero logits everywhere."""
    fmap = FeatureMap(spec.chunk_count, tokens_per_turn, 1)
    return ToyPolicy.zeros(fmap.feature_dim, spec.vocab_size)


def estimate_difficulty(
    spec: EnvSpec,
    evaluator_policies: Mapping[str, ToyPolicy] | Sequence[ToyPolicy],
    n: int,
    seed: int,
    tokens_per_turn: int = 1,
    band: Band = Band(),
) -> InstanceRecord:
    """Run ``n`` seeded rollouts per evaluator and band the mean pass rate.

    Evaluators are single-task policies over ``FeatureMap(K, tokens_per_turn, 1)``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if not isinstance(evaluator_policies, Mapping):
        evaluator_policies = {f"eval{i}": p for i, p in enumerate(evaluator_policies)}
    fmap = FeatureMap(spec.chunk_count, tokens_per_turn, 1)
    ctx = RolloutContext(spec, fmap, tokens_per_turn)
    rates = {}
    for i, (name, policy) in enumerate(sorted(evaluator_policies.items())):
        trajs = rollout_batch(ctx, policy, n, np.random.default_rng([seed, i]))
        rates[name] = sum(t.final_reward > 0 for t in trajs) / n
    mean = float(np.mean(list(rates.values())))
    return InstanceRecord(spec, rates, band.classify(mean, spec.deterministic), n)


def select_training_set(records: Sequence[InstanceRecord], target_count: int) -> list[InstanceRecord]:
    """Moderate records, hardest first (mean pass rate ascending, then id)."""
    moderate = [r for r in records if r.difficulty_band is DifficultyBand.MODERATE]
    moderate.sort(key=lambda r: (r.mean_pass_rate, r.instance_id))
    return moderate[: max(target_count, 0)]


def write_manifest(path: str | Path, records: Sequence[InstanceRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
