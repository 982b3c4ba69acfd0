"""Dynamically masked supervised fine-tuning objective.

Each turn gets a 0/1 mask that is the product of an execution mask (the turn
did not trigger a tool error) and a task-relevance mask. The loss is the
masked negative log-likelihood normalised by the number of unmasked tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from chunkrl.policy import FeatureMap, ToyPolicy
from chunkrl.trajectory import Trajectory


@dataclass(frozen=True)
class AllRelevant:
    def relevant(self, traj: Trajectory) -> list[bool]:
        return [True] * len(traj.turns)


@dataclass(frozen=True)
class ToolProximity:
    """A turn is relevant when it lies within ``window`` turns of a tool call."""

    window: int = 1

    def relevant(self, traj: Trajectory) -> list[bool]:
        calls = [k for k, t in enumerate(traj.turns) if t.ends_with_tool_call]
        return [any(abs(k - j) <= self.window for j in calls) for k in range(len(traj.turns))]


@dataclass(frozen=True)
class RecordedRelevance:
    """Use the relevance flag stored on each turn."""

    def relevant(self, traj: Trajectory) -> list[bool]:
        return [t.relevance_flag for t in traj.turns]


@dataclass(frozen=True)
class SftMaskConfig:
    epsilon: float = 1e-8
    relevance_rule: AllRelevant | ToolProximity | RecordedRelevance = AllRelevant()

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


def turn_masks(traj: Trajectory, cfg: SftMaskConfig) -> list[int]:
    rel = cfg.relevance_rule.relevant(traj)
    return [int((not t.error_flag) and r) for t, r in zip(traj.turns, rel)]


def _token_weights(traj: Trajectory, cfg: SftMaskConfig) -> tuple[np.ndarray, float]:
    masks = turn_masks(traj, cfg)
    w = np.concatenate([np.full(len(t), float(m)) for t, m in zip(traj.turns, masks)]) if traj.turns else np.zeros(0)
    denom = float(sum(m * len(t) for t, m in zip(traj.turns, masks))) + cfg.epsilon
    return w, denom


def _states_actions(traj: Trajectory, fmap: FeatureMap) -> tuple[np.ndarray, np.ndarray]:
    states = fmap.token_states(traj)
    actions = np.array([tok.id for turn in traj.turns for tok in turn.tokens], dtype=np.intp)
    return states, actions


def sft_loss(traj: Trajectory, policy: ToyPolicy, cfg: SftMaskConfig, fmap: FeatureMap) -> float:
    w, denom = _token_weights(traj, cfg)
    if not w.any():
        return 0.0
    states, actions = _states_actions(traj, fmap)
    lp = policy.token_logprobs(states, actions)
    return float(-np.sum(w * lp) / denom)


def sft_loss_grad(traj: Trajectory, policy: ToyPolicy, cfg: SftMaskConfig, fmap: FeatureMap) -> np.ndarray:
    """Gradient of :func:`sft_loss` with respect to the policy parameters."""
    w, denom = _token_weights(traj, cfg)
    if not w.any():
        return np.zeros_like(policy.params)
    states, actions = _states_actions(traj, fmap)
    return -policy.weighted_grad(states, actions, w) / denom
