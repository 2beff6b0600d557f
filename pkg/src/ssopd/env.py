"""Finite token environments with binary verifiers.

Token layout shared by every task built on one :class:`EnvSpec`:

    0                 end-of-sequence (eos)
    1 .. V            ordinary tokens; for ``modular_sum`` the value of a token is its id
    V + 1, V + 2      hint delimiters (never sampleable)
    V + 3 + s         prompt symbol ``s`` for ``0 <= s < prompt_symbols``

The sampleable action set is ``{0, ..., V}`` so an action index is the token id.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

FAMILIES = ("modular_sum", "subsequence_lock")
DEFAULT_ENUMERATION_BUDGET = 10**7

MAX_VOCAB = 64
MAX_HORIZON = 32


class EnumerationBudgetError(RuntimeError):
    pass


class HintLeakError(ValueError):
    """Raised when privileged hint delimiters reach the verifier."""


@dataclass(frozen=True)
class EnvSpec:
    vocab_size: int = 4
    horizon: int = 5
    prompt_symbols: int = 16

    def __post_init__(self):
        if not 1 <= self.vocab_size <= MAX_VOCAB:
            raise ValueError(f"vocab_size must be in [1, {MAX_VOCAB}], got {self.vocab_size}")
        if not 1 <= self.horizon <= MAX_HORIZON:
            raise ValueError(f"horizon must be in [1, {MAX_HORIZON}], got {self.horizon}")
        if self.prompt_symbols < 2:
            raise ValueError("prompt_symbols must be >= 2")

    @property
    def eos_token(self) -> int:
        return 0

    @property
    def hint_open(self) -> int:
        return self.vocab_size + 1

    @property
    def hint_close(self) -> int:
        return self.vocab_size + 2

    @property
    def n_actions(self) -> int:
        """Size of the sampleable alphabet (ordinary tokens plus eos)."""
        return self.vocab_size + 1

    @property
    def n_token_ids(self) -> int:
        return self.vocab_size + 3 + self.prompt_symbols

    def prompt_token(self, symbol: int) -> int:
        if not 0 <= symbol < self.prompt_symbols:
            raise ValueError(f"prompt symbol {symbol} outside [0, {self.prompt_symbols})")
        return self.vocab_size + 3 + symbol

    def is_terminal(self, prefix: tuple[int, ...]) -> bool:
        return len(prefix) >= self.horizon or (len(prefix) > 0 and prefix[-1] == self.eos_token)


@dataclass(frozen=True)
class TaskInstance:
    family: str
    prompt: tuple[int, ...]
    verifier_params: dict
    reference_solution: tuple[int, ...]
    env: EnvSpec
    seed: int
    size_params: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.env.horizon

    def verify(self, tokens) -> int:
        return verify(self, tokens)

    def to_record(self) -> dict:
        return {
            "family": self.family,
            "params": {**self.size_params, **self.verifier_params,
                       "vocab": self.env.vocab_size, "H": self.env.horizon,
                       "prompt_symbols": self.env.prompt_symbols},
            "prompt": list(self.prompt),
            "seed": self.seed,
            "reference_solution": list(self.reference_solution),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_record(cls, record: dict) -> "TaskInstance":
        params = dict(record["params"])
        return make_task(record["family"], params, record["seed"])


@dataclass(frozen=True)
class Completion:
    tokens: tuple[int, ...]
    reward: int
    token_logprobs: tuple[float, ...] | None = None

    @property
    def stop_time(self) -> int:
        return len(self.tokens)

    @property
    def avg_logprob(self) -> float:
        if self.token_logprobs is None:
            raise ValueError("completion carries no behavior log-probabilities")
        return float(sum(self.token_logprobs)) / len(self.tokens)


def _env_from_params(size_params: dict) -> EnvSpec:
    return EnvSpec(
        vocab_size=int(size_params.get("vocab", 4)),
        horizon=int(size_params.get("H", 5)),
        prompt_symbols=int(size_params.get("prompt_symbols", 16)),
    )


def make_task(family: str, size_params: dict, seed: int) -> TaskInstance:
    """Build a task deterministically from ``(family, size_params, seed)``.

    ``modular_sum`` keys: ``m`` (modulus, required), ``t`` (target, drawn from the
    seed when absent). ``subsequence_lock`` keys: ``secret`` or ``secret_len``.
    Both accept ``vocab``, ``H`` and ``prompt_symbols`` for the shared layout.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown task family {family!r}; expected one of {FAMILIES}")
    env = _env_from_params(size_params)
    rng = np.random.default_rng(seed)
    V, H = env.vocab_size, env.horizon

    if family == "modular_sum":
        if "m" not in size_params:
            raise ValueError("modular_sum requires modulus 'm'")
        m = int(size_params["m"])
        if not 2 <= m < env.prompt_symbols:
            raise ValueError(f"modulus must be in [2, {env.prompt_symbols}), got {m}")
        t = int(size_params["t"]) if "t" in size_params else int(rng.integers(m))
        if not 0 <= t < m:
            raise ValueError(f"target {t} outside [0, {m})")
        reference = _modular_sum_reference(t, V, H)
        prompt = (env.prompt_token(t), env.prompt_token(m))
        verifier_params = {"m": m, "t": t}
        size = {"m": m}
    else:
        if "secret" in size_params:
            secret = tuple(int(s) for s in size_params["secret"])
        else:
            length = int(size_params.get("secret_len", 2))
            if length < 1:
                raise ValueError("secret_len must be >= 1")
            secret = tuple(int(s) for s in rng.integers(1, V + 1, size=length))
        if not secret or any(not 1 <= s <= V for s in secret):
            raise ValueError(f"secret tokens must be ordinary tokens in [1, {V}]")
        if len(secret) > H:
            raise ValueError(f"secret of length {len(secret)} cannot fit horizon {H}")
        if V + 1 > env.prompt_symbols:
            raise ValueError("prompt_symbols too small to encode the secret")
        reference = secret + (env.eos_token,) if len(secret) < H else secret
        prompt = tuple(env.prompt_token(s) for s in secret)
        verifier_params = {"secret": list(secret)}
        size = {"secret_len": len(secret)}

    task = TaskInstance(family, prompt, verifier_params, reference, env, int(seed), size)
    assert verify(task, reference) == 1
    return task


def _modular_sum_reference(t: int, V: int, H: int) -> tuple[int, ...]:
    if t == 0:
        return (0,)
    # fewest ordinary tokens summing to exactly t; larger residue representatives need more
    n = math.ceil(t / V)
    if n + 1 > H:
        raise ValueError(f"target {t} needs {n} tokens plus eos, horizon is {H}")
    return (V,) * (n - 1) + (t - V * (n - 1), 0)


def verify(task: TaskInstance, tokens) -> int:
    tokens = tuple(int(a) for a in tokens)
    env = task.env
    if env.hint_open in tokens or env.hint_close in tokens:
        raise HintLeakError("hint delimiter found in a completion")
    if any(not 0 <= a <= env.vocab_size for a in tokens):
        raise ValueError(f"completion contains non-sampleable tokens: {tokens}")

    if task.family == "modular_sum":
        if not tokens or tokens[-1] != env.eos_token or len(tokens) > env.horizon:
            return 0
        p = task.verifier_params
        return int(sum(tokens) % p["m"] == p["t"])

    secret = task.verifier_params["secret"]
    i = 0
    for a in tokens:
        if i < len(secret) and a == secret[i]:
            i += 1
    return int(i == len(secret))


def completion_count(n_actions: int, max_len: int) -> int:
    """Closed-form number of eos-or-length terminated sequences."""
    ordinary = n_actions - 1
    short = sum(ordinary ** (l - 1) for l in range(1, max_len))
    return short + n_actions * ordinary ** (max_len - 1)


def enumerate_completions(task: TaskInstance, max_len: int | None = None,
                          budget: int = DEFAULT_ENUMERATION_BUDGET) -> Iterator[tuple[tuple[int, ...], int]]:
    """Yield every completion of length <= max_len (eos-terminated or cut at max_len)."""
    env = task.env
    max_len = env.horizon if max_len is None else max_len
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if env.n_actions ** max_len > budget:
        raise EnumerationBudgetError(
            f"{env.n_actions}^{max_len} leaves exceeds the enumeration budget {budget}")
    return _enumerate(task, max_len)


def _enumerate(task, max_len):
    env = task.env
    for length in range(1, max_len + 1):
        for body in itertools.product(range(1, env.vocab_size + 1), repeat=length - 1):
            tokens = body + (env.eos_token,)
            yield tokens, verify(task, tokens)
            if length == max_len:
                for a in range(1, env.vocab_size + 1):
                    tokens = body + (a,)
                    yield tokens, verify(task, tokens)
