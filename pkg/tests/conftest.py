import numpy as np
import pytest

from chunkrl.policy import FeatureMap, ToyPolicy
from chunkrl.trajectory import Token, Trajectory, Turn


def random_trajectory(
    rng,
    vocab=3,
    max_turns=4,
    max_tokens=3,
    reward=None,
    tool_prob=0.7,
    last_tool=None,
    lp_spread=1.0,
    version=0,
):
    """Arbitrary well-formed trajectory with random log-probabilities."""
    n_turns = int(rng.integers(1, max_turns + 1))
    turns = []
    for k in range(n_turns):
        tool = bool(rng.random() < tool_prob)
        if k == n_turns - 1 and last_tool is not None:
            tool = last_tool
        toks = tuple(
            Token(
                id=int(rng.integers(vocab)),
                trainer_logprob=-float(rng.uniform(0.01, 3.0)),
                trainer_old_logprob=-float(rng.uniform(0.01, 3.0)),
                sampler_logprob=-float(rng.uniform(0.01, 3.0) * lp_spread),
            )
            for _ in range(int(rng.integers(1, max_tokens + 1)))
        )
        turns.append(
            Turn(
                toks,
                ends_with_tool_call=tool,
                error_flag=bool(rng.random() < 0.2),
                relevance_flag=bool(rng.random() < 0.8),
                observation=b"t%d:ok" % k if tool else b"",
            )
        )
    if reward is None:
        reward = float(rng.integers(0, 2))
    return Trajectory(tuple(turns), final_reward=reward, policy_version=version)


def on_policy_trajectory(rng, policy, fmap, max_turns=4, max_tokens=3, reward=None):
    """Tokens sampled from ``policy`` with all three log-probabilities equal to its own."""
    n_turns = int(rng.integers(1, max_turns + 1))
    turns = []
    for k in range(n_turns):
        toks = []
        for j in range(int(rng.integers(1, max_tokens + 1))):
            lp = policy.state_log_probs(np.array([fmap.state_index(0, k, j)]))[0]
            a = int(rng.choice(len(lp), p=np.exp(lp)))
            toks.append(Token(a, float(lp[a]), float(lp[a]), float(lp[a])))
        turns.append(Turn(tuple(toks), ends_with_tool_call=bool(rng.random() < 0.7)))
    if reward is None:
        reward = float(rng.integers(0, 2))
    return Trajectory(tuple(turns), final_reward=reward)


@pytest.fixture
def fmap():
    return FeatureMap(max_turns=4, tokens_per_turn=3, n_tasks=1)


@pytest.fixture
def policy(fmap):
    return ToyPolicy.random(fmap.feature_dim, 3, seed=11, scale=0.8)


def central_fd(fn, params, h=1e-5):
    """Central finite differences of scalar ``fn(ToyPolicy)`` around ``params``."""
    grad = np.zeros_like(params)
    for idx in np.ndindex(params.shape):
        hi, lo = params.copy(), params.copy()
        hi[idx] += h
        lo[idx] -= h
        grad[idx] = (fn(ToyPolicy(hi)) - fn(ToyPolicy(lo))) / (2 * h)
    return grad


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8))
