"""Trajectory data model and interaction-chunk segmentation.

A trajectory is an ordered list of agent turns. Every turn holds the tokens
the agent emitted, each carrying three log-probabilities recorded at rollout
time: the current trainer policy, the trainer policy that generated the
sample, and the (possibly numerically divergent) sampler. Environment
observations are kept on the turn as opaque bytes and never enter the token
sequence.

A chunk is a contiguous token span that closes at a tool call; trailing
turns after the last tool call form one terminal chunk.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator


class MalformedTrajectoryError(ValueError):
    """Raised when a trajectory violates a structural precondition."""


class FilterReason(str, enum.Enum):
    NONE = "none"
    API_FAILURE = "api_failure"
    NONDETERMINISTIC_TOOL = "nondeterministic_tool"
    ILLEGAL_TOOL_REPEAT = "illegal_tool_repeat"


@dataclass(frozen=True, slots=True)
class Token:
    id: int
    trainer_logprob: float | None = None
    trainer_old_logprob: float | None = None
    sampler_logprob: float | None = None

    def __post_init__(self) -> None:
        if self.id < 0:
            raise MalformedTrajectoryError(f"negative token id {self.id}")
        for name in ("trainer_logprob", "trainer_old_logprob", "sampler_logprob"):
            lp = getattr(self, name)
            if lp is not None and not (math.isfinite(lp) and lp <= 0.0):
                raise MalformedTrajectoryError(f"{name}={lp!r} is not a finite log-probability")


@dataclass(frozen=True, slots=True)
class Turn:
    tokens: tuple[Token, ...]
    ends_with_tool_call: bool = True
    error_flag: bool = False
    relevance_flag: bool = True
    observation: bytes = b""

    def __post_init__(self) -> None:
        if not isinstance(self.tokens, tuple):
            object.__setattr__(self, "tokens", tuple(self.tokens))
        if not self.tokens:
            raise MalformedTrajectoryError("a turn must contain at least one token")
        if self.observation and not self.ends_with_tool_call:
            raise MalformedTrajectoryError("only tool-calling turns carry an observation")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def tool_action(self) -> int:
        """The action id the environment scores: the turn's final token."""
        return self.tokens[-1].id


@dataclass(frozen=True, slots=True)
class Trajectory:
    turns: tuple[Turn, ...]
    final_reward: float = 0.0
    policy_version: int = 0
    filtered_reason: FilterReason = FilterReason.NONE
    task_id: int = 0
    # number of leading chunks replayed from an expert rather than sampled
    prefix_chunks: int = 0

    def __post_init__(self) -> None:
        if not isinstance(self.turns, tuple):
            object.__setattr__(self, "turns", tuple(self.turns))
        if not isinstance(self.filtered_reason, FilterReason):
            object.__setattr__(self, "filtered_reason", FilterReason(self.filtered_reason))
        if self.policy_version < 0:
            raise MalformedTrajectoryError("policy_version must be non-negative")

    @property
    def num_tokens(self) -> int:
        return sum(len(t) for t in self.turns)

    def action_ids(self) -> list[list[int]]:
        return [[tok.id for tok in turn.tokens] for turn in self.turns]


@dataclass(frozen=True, slots=True)
class Chunk:
    index: int  # 1-based position k in 1..K
    start: int
    stop: int
    terminal: bool
    # turns [turn_start, turn_stop) make up the chunk
    turn_start: int = 0
    turn_stop: int = 0

    @property
    def token_span(self) -> range:
        return range(self.start, self.stop)

    def __len__(self) -> int:
        return self.stop - self.start


def flatten_tokens(traj: Trajectory) -> list[Token]:
    return [tok for turn in traj.turns for tok in turn.tokens]


def segment_into_chunks(traj: Trajectory) -> list[Chunk]:
    """Split a trajectory into interaction chunks.

    A chunk boundary falls immediately after every tool-calling turn. Turns
    that follow the last tool call are gathered into a single terminal chunk.
    """
    if not traj.turns:
        raise MalformedTrajectoryError("cannot segment an empty trajectory")

    bounds: list[tuple[int, int, int, int]] = []
    tok_start = tok_pos = 0
    turn_start = 0
    for i, turn in enumerate(traj.turns):
        tok_pos += len(turn)
        if turn.ends_with_tool_call:
            bounds.append((tok_start, tok_pos, turn_start, i + 1))
            tok_start, turn_start = tok_pos, i + 1
    if tok_start < tok_pos:
        bounds.append((tok_start, tok_pos, turn_start, len(traj.turns)))

    n = len(bounds)
    return [
        Chunk(index=k + 1, start=a, stop=b, terminal=(k == n - 1), turn_start=ta, turn_stop=tb)
        for k, (a, b, ta, tb) in enumerate(bounds)
    ]


# -- serialization -----------------------------------------------------------


def trajectory_to_dict(traj: Trajectory) -> dict:
    return {
        "final_reward": traj.final_reward,
        "policy_version": traj.policy_version,
        "filtered_reason": traj.filtered_reason.value,
        "task_id": traj.task_id,
        "prefix_chunks": traj.prefix_chunks,
        "turns": [
            {
                "token_ids": [t.id for t in turn.tokens],
                "trainer_logprob": [t.trainer_logprob for t in turn.tokens],
                "trainer_old_logprob": [t.trainer_old_logprob for t in turn.tokens],
                "sampler_logprob": [t.sampler_logprob for t in turn.tokens],
                "ends_with_tool_call": turn.ends_with_tool_call,
                "error_flag": turn.error_flag,
                "relevance_flag": turn.relevance_flag,
                "observation": turn.observation.hex(),
            }
            for turn in traj.turns
        ],
    }


def trajectory_from_dict(data: dict) -> Trajectory:
    turns = []
    for td in data["turns"]:
        tokens = tuple(
            Token(id=i, trainer_logprob=a, trainer_old_logprob=b, sampler_logprob=c)
            for i, a, b, c in zip(
                td["token_ids"], td["trainer_logprob"], td["trainer_old_logprob"], td["sampler_logprob"]
            )
        )
        turns.append(
            Turn(
                tokens=tokens,
                ends_with_tool_call=td["ends_with_tool_call"],
                error_flag=td["error_flag"],
                relevance_flag=td["relevance_flag"],
                observation=bytes.fromhex(td["observation"]),
            )
        )
    return Trajectory(
        turns=tuple(turns),
        final_reward=data["final_reward"],
        policy_version=data["policy_version"],
        filtered_reason=FilterReason(data.get("filtered_reason", "none")),
        task_id=data.get("task_id", 0),
        prefix_chunks=data.get("prefix_chunks", 0),
    )


def dumps_trajectory(traj: Trajectory) -> str:
    # json emits floats via repr(), which round-trips IEEE doubles exactly
    return json.dumps(trajectory_to_dict(traj), sort_keys=True, allow_nan=False)


def write_trajectories(path: str | Path, trajs: Iterable[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for traj in trajs:
            fh.write(dumps_trajectory(traj))
            fh.write("\n")


def read_trajectories(path: str | Path) -> Iterator[Trajectory]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield trajectory_from_dict(json.loads(line))


__all__ = [
    "Chunk",
    "FilterReason",
    "MalformedTrajectoryError",
    "Token",
    "Trajectory",
    "Turn",
    "dumps_trajectory",
    "flatten_tokens",
    "read_trajectories",
    "segment_into_chunks",
    "trajectory_from_dict",
    "trajectory_to_dict",
    "write_trajectories",
]
