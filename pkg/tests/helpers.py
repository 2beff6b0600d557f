"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np

from ssopd.env import Completion, EnvSpec, make_task, verify
from ssopd.grpo import RolloutGroup
from ssopd.policy import Context, distribution, random_params

EOS = 0


def mod_task(m=5, t=3, vocab=4, H=5, seed=0):
    return make_task("modular_sum", {"m": m, "t": t, "vocab": vocab, "H": H}, seed)


def lock_task(secret, vocab=4, H=5, seed=0):
    return make_task("subsequence_lock", {"secret": list(secret), "vocab": vocab, "H": H}, seed)


def scored(task, tokens, policy=None) -> Completion:
    """Completion with its true reward and, if given, the policy's behavior log-probs."""
    tokens = tuple(tokens)
    logps = None
    if policy is not None:
        logps = tuple(float(distribution(policy, Context(task.prompt + tokens[:t])).logprobs[a])
                      for t, a in enumerate(tokens))
    return Completion(tokens, verify(task, tokens), logps)


def fake(tokens, reward, logps=None) -> Completion:
    """Completion with a forced reward, for selector tests that ignore the verifier."""
    tokens = tuple(tokens)
    if logps is None:
        logps = tuple(-1.0 for _ in tokens)
    return Completion(tokens, reward, tuple(logps))


def group_of(task, token_lists, policy, eps=1e-6) -> RolloutGroup:
    return RolloutGroup.from_completions(task.prompt, [scored(task, t, policy) for t in token_lists],
                                         eps)


def random_tokens(rng, env: EnvSpec, min_len=1):
    """A random well-formed completion: ordinary tokens then eos, or cut at the horizon."""
    n = int(rng.integers(min_len, env.horizon + 1))
    body = [int(x) for x in rng.integers(1, env.vocab_size + 1, size=n)]
    if n < env.horizon or rng.random() < 0.5:
        body[-1] = EOS
    return tuple(body)


def random_mixed_group(rng, task, policy, G=4, tries=500):
    """Group of random completions containing at least one correct and one wrong member."""
    ref = task.reference_solution
    for _ in range(tries):
        toks = [random_tokens(rng, task.env) for _ in range(G)]
        toks[int(rng.integers(G))] = ref
        group = group_of(task, toks, policy)
        if 0 < group.rewards.sum() < G:
            return group
    raise RuntimeError("could not build a mixed group")


def toy_policy(env, seed, scale=0.7):
    return random_params(env, np.random.default_rng(seed), scale=scale)
