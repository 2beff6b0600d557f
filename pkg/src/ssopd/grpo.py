"""Group-relative advantages and the clipped, token-averaged GRPO loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .env import Completion
from .policy import Context, PolicyParams, dist_from_features, featurize


@dataclass(frozen=True)
class GrpoConfig:
    epsilon_r: float = 1e-6
    clip_eps: float = 0.2
    beta: float = 0.0
    group_size: int = 8

    def __post_init__(self):
        if self.epsilon_r <= 0:
            raise ValueError("epsilon_r must be > 0")
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must be in (0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")


@dataclass(frozen=True)
class RolloutGroup:
    prompt: tuple[int, ...]
    completions: tuple[Completion, ...]
    rewards: np.ndarray
    advantages: np.ndarray
    group_mean: float
    group_std: float

    @classmethod
    def from_completions(cls, prompt, completions, epsilon_r: float = 1e-6) -> "RolloutGroup":
        rewards = np.array([c.reward for c in completions], dtype=np.float64)
        adv, mean, std = _advantage_stats(rewards, epsilon_r)
        return cls(tuple(prompt), tuple(completions), rewards, adv, mean, std)

    def __len__(self) -> int:
        return len(self.completions)


def _advantage_stats(rewards: np.ndarray, epsilon_r: float):
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("a group needs at least two rewards")
    mean = r.mean()
    std = math.sqrt(((r - mean) ** 2).mean())
    return (r - mean) / (std + epsilon_r), float(mean), std


def advantages(rewards, epsilon_r: float = 1e-6) -> np.ndarray:
    """``(r_i - mean) / (std + epsilon_r)`` with the population (1/G) std."""
    return _advantage_stats(rewards, epsilon_r)[0]


def policy_ratio(student: PolicyParams, prompt, completion: Completion, t: int) -> float:
    if completion.token_logprobs is None:
        raise ValueError("completion carries no behavior log-probabilities")
    if not 0 <= t < completion.stop_time:
        raise IndexError(f"position {t} outside [0, {completion.stop_time})")
    ctx = Context(tuple(prompt) + completion.tokens[:t])
    d = dist_from_features(student, featurize(ctx, student.env, student.feature_order))
    return math.exp(d.logprobs[completion.tokens[t]] - completion.token_logprobs[t])


def exact_kl(p_logprobs: np.ndarray, r_logprobs: np.ndarray) -> tuple[float, np.ndarray]:
    """KL(p || r) over the sampleable tokens and its gradient w.r.t. p's logits."""
    p = np.exp(p_logprobs)
    diff = p_logprobs - r_logprobs
    kl = float(p @ diff)
    return kl, p * (diff - kl)


def grpo_loss(group: RolloutGroup, student: PolicyParams, reference: PolicyParams | None,
              cfg: GrpoConfig) -> tuple[float, np.ndarray]:
    """Clipped surrogate plus optional exact KL penalty, averaged per completion then per group.

    The gradient flows through the ratio and the KL term only.
    """
    lo, hi = 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps
    grad = np.zeros_like(student.weights)
    total = 0.0
    env, k = student.env, student.feature_order
    for comp, adv in zip(group.completions, group.advantages):
        if comp.token_logprobs is None:
            raise ValueError("completion carries no behavior log-probabilities")
        tau = comp.stop_time
        seq = 0.0
        for t in range(tau):
            idx = featurize(Context(group.prompt + comp.tokens[:t]), env, k)
            d = dist_from_features(student, idx)
            a = comp.tokens[t]
            omega = math.exp(d.logprobs[a] - comp.token_logprobs[t])
            unclipped = omega * adv
            clipped = min(max(omega, lo), hi) * adv
            g_logits = np.zeros(env.n_actions)
            if unclipped <= clipped:
                seq -= unclipped
                # d(omega)/d(logits) = omega * (e_a - p)
                g_logits += adv * omega * d.probs
                g_logits[a] -= adv * omega
            else:
                # clip active: the surrogate is flat in theta
                seq -= clipped
            if cfg.beta > 0:
                if reference is None:
                    raise ValueError("beta > 0 requires a reference policy")
                r = dist_from_features(reference, featurize(Context(group.prompt + comp.tokens[:t]),
                                                            reference.env, reference.feature_order))
                kl, g_kl = exact_kl(d.logprobs, r.logprobs)
                seq += cfg.beta * kl
                g_logits += cfg.beta * g_kl
            grad[idx] += g_logits / (tau * len(group))
        total += seq / tau
    return float(total / len(group)), grad
