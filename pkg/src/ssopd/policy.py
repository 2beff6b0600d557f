"""Featurized softmax policy over token contexts.

One :class:`PolicyParams` value plays every role in training: behavior policy,
student, and stop-gradient teacher. Parameters are a ``(features, actions)``
matrix; the logit of action ``a`` is the sum of column ``a`` over the active
(binary) features of the context.

Feature blocks, in order:

* trailing-window indicators ``(lag, token id)`` for ``lag = 1..k`` over the plain
  state ``prompt + prefix`` (a pad symbol fills positions before the prompt),
* a hinted-context flag,
* hint alignment: the witness token at the index equal to the current prefix
  length, or a "past the end" symbol,
* a bias.

The window deliberately skips the hint block, so a hinted and an unhinted context
for the same state differ only in the two hint blocks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .env import Completion, EnvSpec, TaskInstance, verify


@dataclass(frozen=True)
class Context:
    tokens: tuple[int, ...]
    is_hinted: bool = False


@dataclass(frozen=True)
class FeatureLayout:
    env: EnvSpec
    feature_order: int

    @property
    def n_symbols(self) -> int:
        return self.env.n_token_ids + 1

    @property
    def pad(self) -> int:
        return self.env.n_token_ids

    @property
    def hint_flag(self) -> int:
        return self.feature_order * self.n_symbols

    @property
    def hint_align(self) -> int:
        return self.hint_flag + 1

    @property
    def past_end(self) -> int:
        return self.env.n_actions

    @property
    def bias(self) -> int:
        return self.hint_align + self.env.n_actions + 1

    @property
    def n_features(self) -> int:
        return self.bias + 1

    def lag_feature(self, lag: int, token: int) -> int:
        return (lag - 1) * self.n_symbols + token


@lru_cache(maxsize=64)
def feature_layout(env: EnvSpec, feature_order: int) -> FeatureLayout:
    if feature_order < 1:
        raise ValueError("feature_order must be >= 1")
    return FeatureLayout(env, feature_order)


@dataclass(frozen=True)
class PolicyParams:
    weights: np.ndarray
    env: EnvSpec
    feature_order: int = 2
    seed: int = 0

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)  # always a private copy
        layout = feature_layout(self.env, self.feature_order)
        if w.shape != (layout.n_features, self.env.n_actions):
            raise ValueError(f"weights shape {w.shape} != "
                             f"{(layout.n_features, self.env.n_actions)}")
        if not np.all(np.isfinite(w)):
            raise ValueError("policy weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def layout(self) -> FeatureLayout:
        return feature_layout(self.env, self.feature_order)

    def replace(self, weights: np.ndarray) -> "PolicyParams":
        return PolicyParams(weights, self.env, self.feature_order, self.seed)


@dataclass(frozen=True)
class ActionDistribution:
    probs: np.ndarray
    logprobs: np.ndarray = field(repr=False)


def init_params(env: EnvSpec, feature_order: int = 2, hint_strength: float = 0.0,
                seed: int = 0) -> PolicyParams:
    """Zero weights except an optional prior for copying the aligned witness token.

    The prior only touches hint-alignment features, so unhinted distributions are
    uniform regardless of ``hint_strength``.
    """
    layout = feature_layout(env, feature_order)
    w = np.zeros((layout.n_features, env.n_actions))
    for a in range(env.n_actions):
        w[layout.hint_align + a, a] = hint_strength
    return PolicyParams(w, env, feature_order, seed)


def random_params(env: EnvSpec, rng: np.random.Generator, scale: float = 1.0,
                  feature_order: int = 2) -> PolicyParams:
    layout = feature_layout(env, feature_order)
    w = rng.normal(0.0, scale, size=(layout.n_features, env.n_actions))
    return PolicyParams(w, env, feature_order)


def state_context(prompt, prefix=()) -> Context:
    return Context(tuple(prompt) + tuple(prefix), False)


def split_hint(context: Context, env: EnvSpec):
    """Return ``(plain_tokens, witness, prefix_len)``; witness is None if unhinted."""
    toks = context.tokens
    n_open = toks.count(env.hint_open)
    n_close = toks.count(env.hint_close)
    if not context.is_hinted:
        if n_open or n_close:
            raise ValueError("unhinted context contains hint delimiters")
        return toks, None, None
    if n_open != 1 or n_close != 1:
        raise ValueError("hinted context must contain exactly one hint block")
    i, j = toks.index(env.hint_open), toks.index(env.hint_close)
    if j < i:
        raise ValueError("hint_close precedes hint_open")
    return toks[:i] + toks[j + 1:], toks[i + 1:j], len(toks) - j - 1


def featurize(context: Context, env: EnvSpec, feature_order: int = 2) -> np.ndarray:
    if not context.tokens:
        raise ValueError("context must be nonempty")
    layout = feature_layout(env, feature_order)
    plain, witness, prefix_len = split_hint(context, env)
    idx = []
    for lag in range(1, feature_order + 1):
        tok = plain[-lag] if lag <= len(plain) else layout.pad
        idx.append(layout.lag_feature(lag, tok))
    if witness is not None:
        idx.append(layout.hint_flag)
        aligned = witness[prefix_len] if prefix_len < len(witness) else layout.past_end
        idx.append(layout.hint_align + aligned)
    idx.append(layout.bias)
    return np.array(idx, dtype=np.intp)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


def dist_from_features(params: PolicyParams, idx: np.ndarray,
                       temperature: float = 1.0) -> ActionDistribution:
    logits = params.weights[idx].sum(axis=0)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    logp = _log_softmax(logits / temperature if temperature != 1.0 else logits)
    return ActionDistribution(np.exp(logp), logp)


def distribution(params: PolicyParams, context: Context) -> ActionDistribution:
    """Temperature-1 next-token distribution over the sampleable tokens."""
    return dist_from_features(params, featurize(context, params.env, params.feature_order))


def sample_completion(params: PolicyParams, task: TaskInstance, rng: np.random.Generator,
                      temperature: float = 1.2) -> Completion:
    """Sample until eos or the horizon.

    Tokens are drawn at ``temperature`` while the recorded behavior log-probs are
    the temperature-1 values that the losses compare against.
    """
    env = task.env
    prefix: list[int] = []
    logps: list[float] = []
    while not env.is_terminal(tuple(prefix)):
        idx = featurize(Context(task.prompt + tuple(prefix)), env, params.feature_order)
        d = dist_from_features(params, idx)
        p = d.probs if temperature == 1.0 else dist_from_features(params, idx, temperature).probs
        cdf = np.cumsum(p)
        a = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        a = min(a, env.n_actions - 1)
        prefix.append(a)
        logps.append(float(d.logprobs[a]))
    tokens = tuple(prefix)
    return Completion(tokens, verify(task, tokens), tuple(logps))


def logit_grad_to_params(params: PolicyParams, idx: np.ndarray, g_logits: np.ndarray,
                         out: np.ndarray | None = None) -> np.ndarray:
    """Chain a logit-space gradient through the sparse features into ``out``."""
    if out is None:
        out = np.zeros_like(params.weights)
    out[idx] += g_logits
    return out


def logprob_gradient(params: PolicyParams, context: Context, action: int) -> np.ndarray:
    """Gradient of ``log pi(action | context)``; nonzero only on active feature rows."""
    idx = featurize(context, params.env, params.feature_order)
    d = dist_from_features(params, idx)
    g = -d.probs
    g[action] += 1.0
    return logit_grad_to_params(params, idx, g)


def snapshot(params: PolicyParams) -> PolicyParams:
    return PolicyParams(params.weights.copy(), params.env, params.feature_order, params.seed)


def save_params(path, params: PolicyParams, **extra) -> Path:
    """Write a checkpoint: flat weights plus a JSON header."""
    path = Path(path)
    header = {
        "feature_order": params.feature_order,
        "vocab_size": params.env.vocab_size,
        "horizon": params.env.horizon,
        "prompt_symbols": params.env.prompt_symbols,
        "seed": params.seed,
        "shape": list(params.weights.shape),
        **extra,
    }
    with open(path, "wb") as fh:
        np.savez(fh, weights=params.weights.ravel(),
                 header=np.array(json.dumps(header, sort_keys=True)))
    return path


def load_params(path) -> tuple[PolicyParams, dict]:
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            flat = np.array(data["weights"])
    except (OSError, KeyError, ValueError) as exc:
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc
    env = EnvSpec(header["vocab_size"], header["horizon"], header["prompt_symbols"])
    params = PolicyParams(flat.reshape(header["shape"]), env,
                          header["feature_order"], header["seed"])
    return params, header
