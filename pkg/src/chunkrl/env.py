"""Toy multi-turn tool environments with planted crucial forks.

An episode is ``chunk_count`` agent turns. Each turn's last token is the
tool action the environment scores; turns listed in ``forks`` pass only if
that action is in the fork's correct set. The terminal reward is 1 when
every fork passed and 0 otherwise, so a uniformly random agent succeeds with
probability ``prod(|correct| / vocab_size)``.

Environments are driven through the make/reset/step/close lifecycle, either
in process via :class:`EnvRegistry` or over line-delimited JSON on standard
streams via :func:`serve` and :class:`EnvClient`.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import subprocess
import sys
import threading
from dataclasses import dataclass, field
from typing import IO, Any, Mapping

import numpy as np


class EnvError(RuntimeError):
    pass


class InvalidSpecError(EnvError, ValueError):
    pass


@dataclass(frozen=True)
class NoiseMode:
    kind: str = "none"  # none | api_failure | nondeterministic
    prob: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("none", "api_failure", "nondeterministic"):
            raise InvalidSpecError(f"unknown noise mode {self.kind!r}")
        if not 0.0 <= self.prob <= 1.0:
            raise InvalidSpecError("noise probability must lie in [0, 1]")

    @property
    def deterministic(self) -> bool:
        return self.kind == "none" or self.prob == 0.0


@dataclass(frozen=True)
class EnvSpec:
    chunk_count: int
    vocab_size: int
    forks: Mapping[int, frozenset[int]] = field(default_factory=dict)
    noise_mode: NoiseMode = NoiseMode()
    max_turns: int | None = None
    illegal_actions: frozenset[int] = frozenset()
    name: str = ""

    def __post_init__(self) -> None:
        forks = {int(k): frozenset(int(a) for a in v) for k, v in dict(self.forks).items()}
        object.__setattr__(self, "forks", dict(sorted(forks.items())))
        object.__setattr__(self, "illegal_actions", frozenset(self.illegal_actions))
        if self.max_turns is None:
            object.__setattr__(self, "max_turns", self.chunk_count)
        self.validate()

    def validate(self) -> None:
        if self.chunk_count < 1:
            raise InvalidSpecError("chunk_count must be positive")
        if self.vocab_size < 2:
            raise InvalidSpecError("vocab_size must be at least 2")
        if self.max_turns < self.chunk_count:
            raise InvalidSpecError("max_turns must cover every chunk")
        vocab = set(range(self.vocab_size))
        for k, correct in self.forks.items():
            if not 1 <= k <= self.chunk_count:
                raise InvalidSpecError(f"fork at chunk {k} outside 1..{self.chunk_count}")
            if not correct or not correct < vocab:
                raise InvalidSpecError(f"fork {k}: correct set must be a non-empty proper subset of the vocabulary")
            if correct & self.illegal_actions:
                raise InvalidSpecError(f"fork {k}: an illegal action cannot be correct")
        if not self.illegal_actions <= vocab:
            raise InvalidSpecError("illegal actions outside the vocabulary")

    @property
    def deterministic(self) -> bool:
        return self.noise_mode.deterministic

    def random_success_probability(self) -> float:
        p = 1.0
        for correct in self.forks.values():
            p *= len(correct) / self.vocab_size
        return p

    def solution(self) -> list[int]:
        """One tool action per turn that passes every fork."""
        legal = [a for a in range(self.vocab_size) if a not in self.illegal_actions]
        return [min(self.forks[k]) if k in self.forks else legal[0] for k in range(1, self.chunk_count + 1)]

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "chunk_count": self.chunk_count,
            "vocab_size": self.vocab_size,
            "forks": {str(k): sorted(v) for k, v in self.forks.items()},
            "noise_mode": {"kind": self.noise_mode.kind, "prob": self.noise_mode.prob},
            "max_turns": self.max_turns,
            "illegal_actions": sorted(self.illegal_actions),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EnvSpec":
        nm = d.get("noise_mode") or {}
        return cls(
            chunk_count=int(d["chunk_count"]),
            vocab_size=int(d["vocab_size"]),
            forks={int(k): frozenset(v) for k, v in (d.get("forks") or {}).items()},
            noise_mode=NoiseMode(nm.get("kind", "none"), float(nm.get("prob", 0.0))),
            max_turns=d.get("max_turns"),
            illegal_actions=frozenset(d.get("illegal_actions") or ()),
            name=d.get("name", ""),
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EnvState:
    instance_id: str
    turn_index: int = 0
    fork_record: dict[int, bool] = field(default_factory=dict)
    terminated: bool = False
    determinism_flag: bool = True
    illegal_count: int = 0
    noise_events: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class StepResult:
    observation: bytes
    terminated: bool
    reward: float | None
    error_flag: bool
    info: dict[str, Any] = field(default_factory=dict)


class ToolEnv:
    """A single environment instance."""

    def __init__(self, spec: EnvSpec, instance_id: str = "local"):
        self.spec = spec
        self.state = EnvState(instance_id, determinism_flag=spec.deterministic)
        self._rng = np.random.default_rng(0)

    @property
    def deterministic(self) -> bool:
        return self.spec.deterministic

    def reset(self, seed: int | None = None) -> bytes:
        self.state = EnvState(self.state.instance_id, determinism_flag=self.spec.deterministic)
        self._rng = np.random.default_rng(seed)
        return b"start"

    def step(self, action_tokens: list[int]) -> StepResult:
        st = self.state
        if st.terminated:
            raise EnvError(f"instance {st.instance_id} has terminated; reset it first")
        if len(action_tokens) == 0:
            raise EnvError("a turn must emit at least one token")
        spec = self.spec
        action = int(action_tokens[-1])
        if not 0 <= action < spec.vocab_size:
            raise EnvError(f"action {action} outside vocabulary")
        k = st.turn_index + 1
        error = False
        info: dict[str, Any] = {}
        mode = spec.noise_mode

        api_failed = mode.kind == "api_failure" and mode.prob > 0 and self._rng.random() < mode.prob
        flipped = mode.kind == "nondeterministic" and mode.prob > 0 and self._rng.random() < mode.prob

        if api_failed:
            error = True
            marker = b"api_error"
            st.noise_events.append("api_failure")
            if k in spec.forks:
                st.fork_record[k] = False
        elif action in spec.illegal_actions:
            error = True
            marker = b"illegal"
            st.illegal_count += 1
            if k in spec.forks:
                st.fork_record[k] = False
        elif k in spec.forks:
            passed = action in spec.forks[k]
            if flipped:
                passed = bool(self._rng.random() < 0.5)
                st.noise_events.append("nondeterministic_tool")
            st.fork_record[k] = passed
            marker = b"pass" if passed else b"fail"
        else:
            marker = b"ok"

        st.turn_index += 1
        st.terminated = st.turn_index >= spec.chunk_count
        reward = None
        if st.terminated:
            reward = float(all(st.fork_record.get(f, False) for f in spec.forks))
        if "api_failure" in st.noise_events:
            info["filtered_reason"] = "api_failure"
        elif "nondeterministic_tool" in st.noise_events:
            info["filtered_reason"] = "nondeterministic_tool"
        elif st.illegal_count >= 2:
            info["filtered_reason"] = "illegal_tool_repeat"
        return StepResult(b"t%d:%s" % (k, marker), st.terminated, reward, error, info)


class EnvRegistry:
    """Thread-safe registry implementing make / reset / step / close."""

    def __init__(self) -> None:
        self._envs: dict[str, ToolEnv] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._lock = threading.Lock()
        self._ids = itertools.count(1)

    def make(self, spec: EnvSpec | Mapping[str, Any]) -> str:
        if not isinstance(spec, EnvSpec):
            spec = EnvSpec.from_dict(spec)
        with self._lock:
            iid = f"env-{next(self._ids):06d}"
            self._envs[iid] = ToolEnv(spec, iid)
            self._locks[iid] = threading.Lock()
        return iid

    def _get(self, iid: str) -> tuple[ToolEnv, threading.Lock]:
        with self._lock:
            try:
                return self._envs[iid], self._locks[iid]
            except KeyError:
                raise EnvError(f"unknown environment instance {iid!r}") from None

    def state(self, iid: str) -> EnvState:
        return self._get(iid)[0].state

    def reset(self, iid: str, seed: int | None = None) -> bytes:
        env, lock = self._get(iid)
        with lock:
            return env.reset(seed)

    def step(self, iid: str, action_tokens: list[int]) -> StepResult:
        env, lock = self._get(iid)
        with lock:
            return env.step(action_tokens)

    def close(self, iid: str) -> bool:
        with self._lock:
            if iid not in self._envs:
                raise EnvError(f"unknown environment instance {iid!r}")
            del self._envs[iid]
            del self._locks[iid]
        return True

    def __len__(self) -> int:
        return len(self._envs)


# -- line-delimited protocol --------------------------------------------------------


def handle_request(registry: EnvRegistry, req: Mapping[str, Any]) -> dict[str, Any]:
    verb = req.get("verb")
    iid = req.get("instance_id")
    payload = req.get("payload") or {}
    try:
        if verb == "make":
            return {"ok": True, "instance_id": registry.make(EnvSpec.from_dict(payload))}
        if verb == "reset":
            obs = registry.reset(iid, payload.get("seed"))
            return {"ok": True, "instance_id": iid, "observation": obs.hex()}
        if verb == "step":
            r = registry.step(iid, list(payload["action_tokens"]))
            return {
                "ok": True,
                "instance_id": iid,
                "observation": r.observation.hex(),
                "terminated": r.terminated,
                "reward": r.reward,
                "error_flag": r.error_flag,
                "info": r.info,
            }
        if verb == "close":
            registry.close(iid)
            return {"ok": True, "instance_id": iid}
        return {"ok": False, "error": f"unknown verb {verb!r}"}
    except (EnvError, ValueError, KeyError, TypeError) as exc:
        return {"ok": False, "error": str(exc)}


def serve(stdin: IO[str], stdout: IO[str], registry: EnvRegistry | None = None) -> None:
    """Answer one JSON response line per JSON request line until EOF."""
    registry = registry or EnvRegistry()
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            req = json.loads(line)
        except json.JSONDecodeError as exc:
            resp = {"ok": False, "error": f"bad request: {exc}"}
        else:
            resp = handle_request(registry, req)
        stdout.write(json.dumps(resp, sort_keys=True) + "\n")
        stdout.flush()


class EnvClient:
    """Drive an out-of-process environment server over its standard streams."""

    def __init__(self, cmd: list[str] | None = None):
        cmd = cmd or [sys.executable, "-m", "chunkrl.cli", "env-server"]
        self._proc = subprocess.Popen(cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1)

    def _call(self, verb: str, instance_id: str | None = None, **payload: Any) -> dict[str, Any]:
        assert self._proc.stdin and self._proc.stdout
        self._proc.stdin.write(json.dumps({"verb": verb, "instance_id": instance_id, "payload": payload}) + "\n")
        self._proc.stdin.flush()
        resp = json.loads(self._proc.stdout.readline())
        if not resp["ok"]:
            raise EnvError(resp["error"])
        return resp

    def make(self, spec: EnvSpec) -> str:
        return self._call("make", None, **spec.to_dict())["instance_id"]

    def reset(self, iid: str, seed: int | None = None) -> bytes:
        return bytes.fromhex(self._call("reset", iid, seed=seed)["observation"])

    def step(self, iid: str, action_tokens: list[int]) -> StepResult:
        r = self._call("step", iid, action_tokens=[int(a) for a in action_tokens])
        return StepResult(bytes.fromhex(r["observation"]), r["terminated"], r["reward"], r["error_flag"], r["info"])

    def close(self, iid: str) -> bool:
        self._call("close", iid)
        return True

    def shutdown(self) -> None:
        if self._proc.stdin:
            self._proc.stdin.close()
        self._proc.wait(timeout=10)

    def __enter__(self) -> "EnvClient":
        return self

    def __exit__(self, *exc: object) -> None:
        self.shutdown()
