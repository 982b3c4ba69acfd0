"""Linear-softmax toy policies with exact gradients.

The action distribution at a state is ``softmax(features @ params)``. States
are summarised by one-hot history counts (task slot, number of tool calls so
far, tokens already emitted in the current turn), so ``features @ params`` is
a row lookup and every log-probability and gradient has a closed form.

:class:`SamplerVariant` emulates an inference engine that runs the same
weights through a different numeric stack: a fixed pseudo-random parameter
perturbation plus optional logit quantisation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from chunkrl.trajectory import Trajectory


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = np.max(logits, axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


@dataclass(frozen=True)
class FeatureMap:
    """One-hot encoding of (task slot, tool calls so far, position in turn).

    Counts past the table size are clamped onto the last slot.
    """

    max_turns: int
    tokens_per_turn: int
    n_tasks: int = 1

    @property
    def feature_dim(self) -> int:
        return self.n_tasks * self.max_turns * self.tokens_per_turn

    def state_index(self, task: int, turn: int, pos: int) -> int:
        task = min(max(task, 0), self.n_tasks - 1)
        turn = min(turn, self.max_turns - 1)
        pos = min(pos, self.tokens_per_turn - 1)
        return (task * self.max_turns + turn) * self.tokens_per_turn + pos

    def features(self, task: int, turn: int, pos: int) -> np.ndarray:
        x = np.zeros(self.feature_dim)
        x[self.state_index(task, turn, pos)] = 1.0
        return x

    def turn_states(self, task: int, turn: int, length: int) -> np.ndarray:
        return np.array([self.state_index(task, turn, j) for j in range(length)], dtype=np.intp)

    def token_states(self, traj: Trajectory) -> np.ndarray:
        """State index of every token of ``traj`` in flattened order."""
        out: list[int] = []
        for k, turn in enumerate(traj.turns):
            out.extend(self.state_index(traj.task_id, k, j) for j in range(len(turn)))
        return np.asarray(out, dtype=np.intp)


@dataclass(frozen=True, eq=False)
class ToyPolicy:
    params: np.ndarray
    version: int = 0

    def __post_init__(self) -> None:
        p = np.array(self.params, dtype=np.float64)  # private copy
        if p.ndim != 2:
            raise ValueError("params must be a (feature_dim, vocab_size) matrix")
        if not np.all(np.isfinite(p)):
            raise ValueError("policy parameters must be finite")
        p.setflags(write=False)
        object.__setattr__(self, "params", p)

    @classmethod
    def zeros(cls, feature_dim: int, vocab_size: int) -> "ToyPolicy":
        return cls(np.zeros((feature_dim, vocab_size)))

    @classmethod
    def random(cls, feature_dim: int, vocab_size: int, seed: int, scale: float = 0.1) -> "ToyPolicy":
        rng = np.random.default_rng(seed)
        return cls(scale * rng.standard_normal((feature_dim, vocab_size)))

    @property
    def vocab_size(self) -> int:
        return self.params.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.params.shape[0]

    def effective_params(self) -> np.ndarray:
        return self.params

    def updated(self, delta: np.ndarray) -> "ToyPolicy":
        return ToyPolicy(self.params + delta, version=self.version + 1)

    # dense-feature interface

    def log_probs(self, features: np.ndarray) -> np.ndarray:
        return log_softmax(np.asarray(features, dtype=np.float64) @ self.effective_params())

    def logprob(self, features: np.ndarray, action: int) -> float:
        _check_action(action, self.vocab_size)
        return float(self.log_probs(features)[action])

    def logprob_grad(self, features: np.ndarray, action: int) -> np.ndarray:
        """d log pi(action | features) / d params."""
        _check_action(action, self.vocab_size)
        x = np.asarray(features, dtype=np.float64)
        p = np.exp(self.log_probs(x))
        onehot = np.zeros(self.vocab_size)
        onehot[action] = 1.0
        return np.outer(x, onehot - p)

    def sample_action(self, features: np.ndarray, rng_seed: int | np.random.Generator) -> int:
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
        p = np.exp(self.log_probs(features))
        return _inverse_cdf(p, rng.random())

    # one-hot state-index fast path used by the objectives

    def state_log_probs(self, states: np.ndarray) -> np.ndarray:
        return log_softmax(self.effective_params()[np.asarray(states, dtype=np.intp)])

    def token_logprobs(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        lp = self.state_log_probs(states)
        return lp[np.arange(len(lp)), np.asarray(actions, dtype=np.intp)]

    def weighted_grad(self, states: np.ndarray, actions: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """sum_t weights[t] * d log pi(actions[t] | states[t]) / d params."""
        states = np.asarray(states, dtype=np.intp)
        actions = np.asarray(actions, dtype=np.intp)
        weights = np.asarray(weights, dtype=np.float64)
        if np.any(actions >= self.vocab_size) or np.any(actions < 0):
            raise ValueError("action id outside the policy vocabulary")
        grad = np.zeros_like(self.params)
        if len(states) == 0:
            return grad
        p = np.exp(self.state_log_probs(states))
        rows = -weights[:, None] * p
        rows[np.arange(len(states)), actions] += weights
        np.add.at(grad, states, rows)
        return grad


@dataclass(frozen=True, eq=False)
class SamplerVariant:
    """A sampler whose probabilities drift from the trainer's.

    ``perturbation_scale`` multiplies a fixed standard-normal matrix drawn from
    ``seed``; ``jitter_scale`` adds a second one drawn from ``(seed,
    base.version)``, so that part of the drift changes with every update.
    ``rounding_bits`` quantises logits to multiples of 2**-bits. With both
    scales 0 and no rounding the sampler reproduces the base policy bit for bit.
    """

    base: ToyPolicy
    perturbation_scale: float = 0.0
    rounding_bits: int | None = None
    seed: int = 0
    jitter_scale: float = 0.0
    _params: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.perturbation_scale < 0 or self.jitter_scale < 0:
            raise ValueError("perturbation scales must be non-negative")
        params = self.base.params
        if self.perturbation_scale > 0:
            noise = np.random.default_rng(self.seed).standard_normal(params.shape)
            params = params + self.perturbation_scale * noise
        if self.jitter_scale > 0:
            noise = np.random.default_rng([self.seed, self.base.version]).standard_normal(params.shape)
            params = params + self.jitter_scale * noise
        object.__setattr__(self, "_params", params)

    @property
    def vocab_size(self) -> int:
        return self.base.vocab_size

    @property
    def version(self) -> int:
        return self.base.version

    def _logits(self, raw: np.ndarray) -> np.ndarray:
        if self.rounding_bits is None:
            return raw
        q = float(2**self.rounding_bits)
        return np.round(raw * q) / q

    def log_probs(self, features: np.ndarray) -> np.ndarray:
        return log_softmax(self._logits(np.asarray(features, dtype=np.float64) @ self._params))

    def logprob(self, features: np.ndarray, action: int) -> float:
        _check_action(action, self.vocab_size)
        return float(self.log_probs(features)[action])

    def state_log_probs(self, states: np.ndarray) -> np.ndarray:
        return log_softmax(self._logits(self._params[np.asarray(states, dtype=np.intp)]))

    def token_logprobs(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        lp = self.state_log_probs(states)
        return lp[np.arange(len(lp)), np.asarray(actions, dtype=np.intp)]

    def sample_action(self, features: np.ndarray, rng_seed: int | np.random.Generator) -> int:
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
        return _inverse_cdf(np.exp(self.log_probs(features)), rng.random())


def _check_action(action: int, vocab_size: int) -> None:
    if not 0 <= action < vocab_size:
        raise ValueError(f"action {action} outside vocabulary of size {vocab_size}")


def _inverse_cdf(p: np.ndarray, u: float) -> int:
    idx = int(np.searchsorted(np.cumsum(p), u, side="right"))
    return min(idx, len(p) - 1)


def sample_tokens(log_probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Vectorised inverse-CDF draw: row ``i`` of ``log_probs`` against ``u[..., i]``."""
    cdf = np.cumsum(np.exp(log_probs), axis=-1)
    idx = (u[..., None] >= cdf).sum(axis=-1)
    return np.minimum(idx, log_probs.shape[-1] - 1)


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(policy: ToyPolicy, path: str | Path) -> None:
    doc = {
        "version": policy.version,
        "feature_dim": policy.feature_dim,
        "vocab_size": policy.vocab_size,
        "params": [float(v) for v in policy.params.ravel(order="C")],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> ToyPolicy:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    params = np.array(doc["params"], dtype=np.float64).reshape(doc["feature_dim"], doc["vocab_size"])
    return ToyPolicy(params, version=int(doc["version"]))
