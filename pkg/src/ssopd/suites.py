"""Task suites placed in the frontier band of a reference policy."""

from __future__ import annotations

import numpy as np

from .env import EnvSpec, TaskInstance, make_task
from .oracle import exact_values


def uniform_policy(env: EnvSpec):
    probs = np.full(env.n_actions, 1.0 / env.n_actions)
    return lambda prefix: probs


def base_success(task: TaskInstance, policy=None) -> float:
    """Exact success probability; the uniform (zero-weight) policy by default."""
    policy = uniform_policy(task.env) if policy is None else policy
    return exact_values(task, policy).v[()]


def frontier_suite(env: EnvSpec, n: int, seed: int, family: str = "modular_sum",
                   moduli: tuple[int, int] = (2, 7), secret_len: tuple[int, int] = (1, 3),
                   band: tuple[float, float] = (0.2, 0.8), max_draws: int = 100_000) -> list[TaskInstance]:
    """Draw tasks until ``n`` have base success inside ``band``.

    Candidates are seeded ``seed * max_draws + j`` so suites with different seeds
    never share a draw.
    """
    rng = np.random.default_rng(seed)
    cache: dict = {}
    tasks: list[TaskInstance] = []
    common = {"vocab": env.vocab_size, "H": env.horizon, "prompt_symbols": env.prompt_symbols}
    for j in range(max_draws):
        if family == "modular_sum":
            params = {"m": int(rng.integers(moduli[0], moduli[1] + 1)), **common}
        else:
            params = {"secret_len": int(rng.integers(secret_len[0], secret_len[1] + 1)), **common}
        try:
            task = make_task(family, params, seed * max_draws + j)
        except ValueError:
            continue
        key = (task.family, task.prompt)
        if key not in cache:
            cache[key] = base_success(task)
        if band[0] <= cache[key] <= band[1]:
            tasks.append(task)
            if len(tasks) == n:
                return tasks
    raise RuntimeError(f"only {len(tasks)} of {n} tasks fell in the band {band}")
