"""Discrete-event model of asynchronous rollout and training on a GPU pool.

Time advances in integer ticks. A rollout GPU serves a FIFO queue of samples
and works only on its head, one unit of work per tick. The trainer waits for
``batch_size`` valid samples, trains, and bumps the policy version; weight
sync pauses every rollout GPU for ``sync_duration`` ticks.

Two pool layouts are modelled:

* ``StaticSplit(train_gpus)``: a fixed partition into rollout and train GPUs.
* ``Multiplexed(shrink_gpus)``: every GPU rolls out; once a batch is ready,
  the highest-numbered ``shrink_gpus`` GPUs switch to training (their queued
  samples move to the GPUs that keep rolling out) and switch back when the
  step is done.

``train_duration`` is GPU-time: a step on ``g`` GPUs takes
``ceil(train_duration / g)`` ticks.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np


class SchedulerConfigError(ValueError):
    pass


class SimulationStalled(RuntimeError):
    pass


@dataclass(frozen=True)
class LatencyModel:
    """Rollout latency: ``tail`` ticks with probability ``tail_prob``, else ``body``."""

    body: int = 10
    tail_prob: float = 0.0
    tail: int = 100

    def __post_init__(self) -> None:
        if self.body < 1 or self.tail < 1:
            raise SchedulerConfigError("latencies must be at least one tick")
        if not 0.0 <= self.tail_prob <= 1.0:
            raise SchedulerConfigError("tail_prob must lie in [0, 1]")

    def draw(self, rng: np.random.Generator) -> int:
        # one uniform per sample keeps the trace identical across pool layouts
        return self.tail if rng.random() < self.tail_prob else self.body


@dataclass(frozen=True)
class StaticSplit:
    train_gpus: int


@dataclass(frozen=True)
class Multiplexed:
    shrink_gpus: int


@dataclass(frozen=True)
class SchedulerConfig:
    total_gpus: int
    async_ratio: int
    batch_size: int
    latency: LatencyModel
    train_duration: int
    mode: StaticSplit | Multiplexed
    sync_duration: int = 1
    transition_cost: int = 0  # extra training ticks per shrink
    consolidation_stretch: float = 1.0  # remaining work multiplier for migrated samples

    def __post_init__(self) -> None:
        if self.total_gpus < 2:
            raise SchedulerConfigError("need at least two GPUs")
        if self.async_ratio < 0:
            raise SchedulerConfigError("async_ratio must be non-negative")
        if self.batch_size < 1:
            raise SchedulerConfigError("batch_size must be positive")
        if self.train_duration < 1 or self.sync_duration < 0 or self.transition_cost < 0:
            raise SchedulerConfigError("durations must be non-negative (training positive)")
        if self.consolidation_stretch < 1.0:
            raise SchedulerConfigError("consolidation_stretch must be at least 1")
        g = self.train_gpus
        if g < 1 or g >= self.total_gpus:
            what = "shrink_gpus" if isinstance(self.mode, Multiplexed) else "train_gpus"
            raise SchedulerConfigError(f"{what} must lie in 1..total_gpus-1")

    @property
    def train_gpus(self) -> int:
        return self.mode.shrink_gpus if isinstance(self.mode, Multiplexed) else self.mode.train_gpus

    @property
    def train_ticks(self) -> int:
        return math.ceil(self.train_duration / self.train_gpus)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["mode"] = (
            {"kind": "multiplexed", "shrink_gpus": self.mode.shrink_gpus}
            if isinstance(self.mode, Multiplexed)
            else {"kind": "static_split", "train_gpus": self.mode.train_gpus}
        )
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SchedulerConfig":
        d = dict(d)
        mode = dict(d.pop("mode"))
        kind = mode.pop("kind")
        if kind == "multiplexed":
            d["mode"] = Multiplexed(**mode)
        elif kind == "static_split":
            d["mode"] = StaticSplit(**mode)
        else:
            raise SchedulerConfigError(f"unknown mode {kind!r}")
        d["latency"] = LatencyModel(**d.get("latency", {}))
        try:
            return cls(**d)
        except TypeError as exc:
            raise SchedulerConfigError(str(exc)) from exc


@dataclass(frozen=True)
class SampleBufferEntry:
    sample_id: int
    generating_version: int
    completion_time: int
    trajectory: Any = None


def staleness_check(entry: SampleBufferEntry, current_version: int, async_ratio: int) -> str:
    gap = current_version - entry.generating_version
    if gap < 0:
        raise ValueError("sample is newer than the current policy")
    return "keep" if gap <= async_ratio else "discard"


@dataclass
class _Job:
    sample_id: int
    version: int
    remaining: int


@dataclass
class SimulationResult:
    gpu_busy_fraction: float
    discarded_samples: int
    steps_completed: int
    makespan: int
    produced: int
    consumed: int
    in_buffer: int
    events: list[dict[str, Any]] = field(default_factory=list, repr=False)

    def metrics(self) -> dict[str, Any]:
        return {
            "gpu_busy_fraction": self.gpu_busy_fraction,
            "discarded_samples": self.discarded_samples,
            "steps_completed": self.steps_completed,
            "makespan": self.makespan,
            "produced": self.produced,
            "consumed": self.consumed,
            "in_buffer": self.in_buffer,
        }


class _Sim:
    def __init__(self, cfg: SchedulerConfig, seed: int):
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.multiplexed = isinstance(cfg.mode, Multiplexed)
        G = cfg.total_gpus
        n_roll = G if self.multiplexed else G - cfg.train_gpus
        self.rollout_gpus = list(range(n_roll))
        self.queues: dict[int, deque[_Job]] = {g: deque() for g in range(G)}
        self.buffer: list[SampleBufferEntry] = []
        self.events: list[dict[str, Any]] = []
        self.t = 0
        self.c = 0  # trainer version
        self.r = 0  # version loaded on rollout GPUs
        self.training = 0  # ticks left in the current step
        self.sync_left = 0
        self.sync_target = 0
        self.next_id = 0
        self.busy = 0
        self.produced = self.consumed = self.discarded = 0

    def log(self, event: str, gpu: int | None = None, sample: int | None = None, version: int | None = None) -> None:
        self.events.append({"time": self.t, "event": event, "gpu": gpu, "sample": sample, "version": version})

    # -- weight sync ---------------------------------------------------------
    def start_sync(self) -> None:
        self.sync_target = self.c
        self.log("sync_start", version=self.c)
        self.sync_left = self.cfg.sync_duration
        if self.sync_left == 0:
            self.finish_sync()

    def finish_sync(self) -> None:
        self.r = self.sync_target
        self.log("sync_end", version=self.r)

    # -- rollout -------------------------------------------------------------
    def in_flight(self) -> int:
        return sum(len(q) for q in self.queues.values())

    def may_launch(self) -> bool:
        cfg = self.cfg
        if self.sync_left:
            return False
        if self.in_flight() + len(self.buffer) >= (cfg.async_ratio + 1) * cfg.batch_size:
            return False
        next_fetch = self.c + 1 if self.training else self.c
        return next_fetch - self.r <= cfg.async_ratio

    def launch(self) -> None:
        for g in self.rollout_gpus:
            if self.queues[g] or not self.may_launch():
                continue
            job = _Job(self.next_id, self.r, self.cfg.latency.draw(self.rng))
            self.next_id += 1
            self.queues[g].append(job)
            self.log("launch", g, job.sample_id, job.version)

    # -- trainer -------------------------------------------------------------
    def try_fetch(self) -> None:
        cfg = self.cfg
        keep = []
        for e in self.buffer:
            if staleness_check(e, self.c, cfg.async_ratio) == "keep":
                keep.append(e)
            else:
                self.discarded += 1
                self.log("discard", sample=e.sample_id, version=e.generating_version)
        self.buffer = keep
        if len(self.buffer) < cfg.batch_size:
            return
        batch, self.buffer = self.buffer[: cfg.batch_size], self.buffer[cfg.batch_size :]
        for e in batch:
            assert self.c - e.generating_version <= cfg.async_ratio
            self.consumed += 1
            self.log("consume", sample=e.sample_id, version=e.generating_version)
        self.training = cfg.train_ticks
        if self.multiplexed:
            self.shrink()
            self.training += cfg.transition_cost
        self.log("train_start", version=self.c)
        if self.r < self.c:
            self.start_sync()

    def shrink(self) -> None:
        S = self.cfg.train_gpus
        leaving = self.rollout_gpus[-S:]
        self.rollout_gpus = self.rollout_gpus[:-S]
        for g in leaving:
            self.log("shrink", g)
            while self.queues[g]:
                job = self.queues[g].popleft()
                job.remaining = math.ceil(job.remaining * self.cfg.consolidation_stretch)
                dest = min(self.rollout_gpus, key=lambda h: (len(self.queues[h]), h))
                self.queues[dest].append(job)
                self.log("migrate", dest, job.sample_id, job.version)

    def expand(self) -> None:
        freed = list(range(len(self.rollout_gpus), self.cfg.total_gpus))
        self.rollout_gpus = list(range(self.cfg.total_gpus))
        for g in freed:
            self.log("expand", g)
        for g in freed:
            donor = max(self.rollout_gpus, key=lambda h: (len(self.queues[h]), -h))
            if len(self.queues[donor]) < 2:
                break
            job = self.queues[donor].pop()
            self.queues[g].append(job)
            self.log("migrate", g, job.sample_id, job.version)

    # -- main loop -----------------------------------------------------------
    def run(self, n_steps: int) -> SimulationResult:
        cfg = self.cfg
        steps = 0
        limit = 10_000 + 1000 * n_steps * (cfg.latency.tail + cfg.train_ticks + cfg.sync_duration + cfg.transition_cost)
        while steps < n_steps:
            if not self.training:
                self.try_fetch()
            self.launch()
            if not (self.training or self.sync_left or self.in_flight()):
                raise SimulationStalled(f"no work possible at t={self.t}")
            if self.t > limit:
                raise SimulationStalled("simulation exceeded its time limit")

            done: list[tuple[int, _Job]] = []
            sync_done = train_done = False
            if not self.sync_left:
                for g in self.rollout_gpus:
                    if self.queues[g]:
                        self.busy += 1
                        head = self.queues[g][0]
                        head.remaining -= 1
                        if head.remaining == 0:
                            done.append((g, self.queues[g].popleft()))
            else:
                self.sync_left -= 1
                sync_done = self.sync_left == 0
            if self.training:
                self.busy += cfg.train_gpus
                self.training -= 1
                train_done = self.training == 0
            self.t += 1

            for g, job in done:
                self.produced += 1
                self.buffer.append(SampleBufferEntry(job.sample_id, job.version, self.t))
                self.log("complete", g, job.sample_id, job.version)
            if sync_done:
                self.finish_sync()
            if train_done:
                self.c += 1
                steps += 1
                self.log("train_end", version=self.c)
                if self.multiplexed:
                    self.expand()
                if self.c - self.r > cfg.async_ratio and not self.sync_left:
                    self.start_sync()

        return SimulationResult(
            gpu_busy_fraction=self.busy / (cfg.total_gpus * self.t),
            discarded_samples=self.discarded,
            steps_completed=steps,
            makespan=self.t,
            produced=self.produced,
            consumed=self.consumed,
            in_buffer=len(self.buffer),
            events=self.events,
        )


def run_simulation(cfg: SchedulerConfig, seed: int, n_steps: int) -> SimulationResult:
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    return _Sim(cfg, seed).run(n_steps)


def write_event_log(path: str | Path, events: list[dict[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in events:
            fh.write(json.dumps(e, sort_keys=True) + "\n")


def best_static_split(cfg: SchedulerConfig, seed: int, n_steps: int) -> tuple[int, SimulationResult]:
    """Exhaustive sweep over static train-GPU counts; returns the best by busy fraction."""
    best = None
    for t in range(1, cfg.total_gpus):
        res = run_simulation(_replace_mode(cfg, StaticSplit(t)), seed, n_steps)
        if best is None or res.gpu_busy_fraction > best[1].gpu_busy_fraction:
            best = (t, res)
    return best


def _replace_mode(cfg: SchedulerConfig, mode: StaticSplit | Multiplexed) -> SchedulerConfig:
    return replace(cfg, mode=mode)


def long_tail_workload(total_gpus: int = 8, seed: int = 0) -> SchedulerConfig:
    """The shipped long-tail family: 10% of rollouts take ten times longer."""
    return SchedulerConfig(
        total_gpus=total_gpus,
        async_ratio=1,
        batch_size=2 * total_gpus,
        latency=LatencyModel(body=10, tail_prob=0.1, tail=100),
        train_duration=20 * total_gpus,
        mode=Multiplexed(total_gpus // 2),
        sync_duration=1,
    )
