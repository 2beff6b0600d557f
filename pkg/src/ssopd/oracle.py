"""Exact values, posteriors and theorem checks by full prefix-tree enumeration.

Policies are handled as functions ``prefix -> probs`` over the sampleable tokens;
:func:`as_policy_fn` wraps :class:`PolicyParams` for a task. This makes local
edits (a different distribution at one state) cheap to express, and every
edited value is obtained by re-enumerating the subtree rather than by algebra.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .env import (
    DEFAULT_ENUMERATION_BUDGET,
    Completion,
    EnumerationBudgetError,
    TaskInstance,
    verify,
)
from .policy import PolicyParams, distribution, state_context

PolicyFn = Callable[[tuple], np.ndarray]

IDENTITY_TOL = 1e-9
BOUND_TOL = 1e-9
BINOMIAL_TOL = 1e-12


class ZeroValueState(ValueError):
    """The state's value is zero, so the desirability posterior is undefined."""


class UndefinedDistribution(ValueError):
    pass


@dataclass(frozen=True)
class DesirabilitySpec:
    kind: str = "binary_reward"
    gamma: float = 0.9
    table: dict | None = None

    def __post_init__(self):
        if self.kind not in ("binary_reward", "fast_success", "custom_table"):
            raise ValueError(f"unknown desirability kind {self.kind!r}")
        if self.kind == "fast_success" and not 0 < self.gamma < 1:
            raise ValueError("gamma must be in (0, 1)")
        if self.kind == "custom_table":
            if self.table is None or any(v < 0 for v in self.table.values()):
                raise ValueError("custom_table needs a table of nonnegative scores")

    def root_score(self, task: TaskInstance, y: tuple) -> float:
        """Score of a complete sequence measured from the root."""
        if self.kind == "binary_reward":
            return float(verify(task, y))
        if self.kind == "fast_success":
            return verify(task, y) * self.gamma ** len(y)
        return float(self.table.get(tuple(y), 0.0))

    def state_scale(self, depth: int) -> float:
        # fast-success scores count only the remaining steps after the state
        return self.gamma ** depth if self.kind == "fast_success" else 1.0


BINARY = DesirabilitySpec("binary_reward")


def fast_success(gamma: float) -> DesirabilitySpec:
    return DesirabilitySpec("fast_success", gamma)


@dataclass
class ExactValues:
    v: dict
    q: dict
    pi: dict
    spec: DesirabilitySpec

    def check_consistency(self, tol: float = 1e-12) -> float:
        worst = 0.0
        for s, qs in self.q.items():
            worst = max(worst, abs(self.v[s] - float(self.pi[s] @ qs)))
        if worst > tol * max(1.0, max(abs(x) for x in self.v.values())):
            raise AssertionError(f"V != sum_a pi Q (max gap {worst:.3e})")
        return worst


@dataclass(frozen=True)
class TheoremReport:
    name: str
    residual_or_slack: float
    inputs_digest: dict = field(default_factory=dict)
    kind: str = "identity"
    tol: float = IDENTITY_TOL
    skipped: int = 0

    @property
    def passed(self) -> bool | None:
        if math.isnan(self.residual_or_slack):
            return None
        if self.kind == "identity":
            return self.residual_or_slack < self.tol
        return self.residual_or_slack >= -self.tol


def as_policy_fn(task: TaskInstance, policy) -> PolicyFn:
    if isinstance(policy, PolicyParams):
        cache: dict = {}

        def fn(prefix):
            prefix = tuple(prefix)
            if prefix not in cache:
                cache[prefix] = distribution(policy, state_context(task.prompt, prefix)).probs
            return cache[prefix]
        return fn
    if callable(policy):
        return policy
    raise TypeError("policy must be PolicyParams or a callable prefix -> probs")


def edited_policy(base: PolicyFn, state: tuple, probs) -> PolicyFn:
    state = tuple(state)
    probs = np.asarray(probs, dtype=np.float64)

    def fn(prefix):
        return probs if tuple(prefix) == state else base(prefix)
    return fn


def _check_budget(task: TaskInstance, budget: int):
    env = task.env
    if env.n_actions ** env.horizon > budget:
        raise EnumerationBudgetError(
            f"{env.n_actions}^{env.horizon} leaves exceeds the enumeration budget {budget}")


def exact_values(task: TaskInstance, policy, spec: DesirabilitySpec = BINARY,
                 budget: int = DEFAULT_ENUMERATION_BUDGET, root: tuple = ()) -> ExactValues:
    """Backward induction over the complete prefix tree below ``root``."""
    _check_budget(task, budget)
    env = task.env
    pi_fn = as_policy_fn(task, policy)
    v, q, pi = {}, {}, {}

    def solve(state):
        if env.is_terminal(state):
            return spec.root_score(task, state)
        probs = np.asarray(pi_fn(state), dtype=np.float64)
        child = np.array([solve(state + (a,)) for a in range(env.n_actions)])
        u = float(probs @ child)
        scale = spec.state_scale(len(state))
        v[state], q[state], pi[state] = u / scale, child / scale, probs
        return u

    solve(tuple(root))
    return ExactValues(v, q, pi, spec)


def value_at(task: TaskInstance, policy, spec: DesirabilitySpec, state: tuple) -> float:
    """V at ``state`` by enumerating only its subtree."""
    return exact_values(task, policy, spec, root=tuple(state)).v[tuple(state)]


def _action_variance(pi: np.ndarray, q: np.ndarray) -> float:
    mean = float(pi @ q)
    return float(pi @ (q - mean) ** 2)


def desirability_posterior(values: ExactValues, state: tuple) -> np.ndarray:
    """Behavior policy reweighted by the action-values: ``pi * Q / V``."""
    state = tuple(state)
    v = values.v[state]
    if v <= 0:
        raise ZeroValueState(f"V(state)=0 at {state}; posterior undefined")
    return values.pi[state] * values.q[state] / v


def local_edit_value(values: ExactValues, state: tuple, target, eta: float) -> float:
    state = tuple(state)
    pi = values.pi[state]
    mixed = (1.0 - eta) * pi + eta * np.asarray(target)
    return float(mixed @ values.q[state])


def _digest(task: TaskInstance, policy=None, **extra) -> dict:
    h = hashlib.sha1(task.to_json().encode())
    if isinstance(policy, PolicyParams):
        h.update(policy.weights.tobytes())
    return {"task": h.hexdigest()[:12], **extra}


def check_theorem_local_edit(task: TaskInstance, policy, spec: DesirabilitySpec, state: tuple,
                             eta: float) -> TheoremReport:
    state = tuple(state)
    pi_fn = as_policy_fn(task, policy)
    values = exact_values(task, pi_fn, spec, root=state)
    v = values.v[state]
    q_phi = desirability_posterior(values, state)
    v_edit = value_at(task, edited_policy(pi_fn, state, (1 - eta) * values.pi[state] + eta * q_phi),
                      spec, state)
    predicted = eta * _action_variance(values.pi[state], values.q[state]) / v
    return TheoremReport("local_edit_identity", abs((v_edit - v) - predicted),
                         _digest(task, policy, state=list(state), eta=eta, kind=spec.kind))


def teacher_error(q_T, q_F, values: ExactValues, state: tuple) -> float:
    qs = values.q[tuple(state)]
    return abs(float(np.asarray(q_T) @ qs) - float(np.asarray(q_F) @ qs))


def check_approx_edit(task: TaskInstance, policy, spec: DesirabilitySpec, state: tuple, q_T,
                      eta: float) -> TheoremReport:
    state = tuple(state)
    q_T = np.asarray(q_T, dtype=np.float64)
    pi_fn = as_policy_fn(task, policy)
    values = exact_values(task, pi_fn, spec, root=state)
    v = values.v[state]
    q_phi = desirability_posterior(values, state)
    eps = teacher_error(q_T, q_phi, values, state)
    v_edit = value_at(task, edited_policy(pi_fn, state, (1 - eta) * values.pi[state] + eta * q_T),
                      spec, state)
    bound = eta * (_action_variance(values.pi[state], values.q[state]) / v - eps)
    return TheoremReport("approx_edit_bound", (v_edit - v) - bound,
                         _digest(task, policy, state=list(state), eta=eta, eps=eps),
                         kind="bound", tol=BOUND_TOL)


def hinted_teacher_fn(task: TaskInstance, teacher: PolicyParams, witness) -> PolicyFn:
    from .distill import build_hint, teacher_distribution

    def fn(prefix):
        return teacher_distribution(teacher, build_hint(task.prompt, prefix, witness, task.env)).probs
    return fn


def check_stopping_bound(task: TaskInstance, policy, y_plus: Completion, y_minus: Completion,
                         gamma: float, eta: float, K: int, teacher) -> TheoremReport:
    """Averaged teacher-edit bound over the first ``min(K, len(y_minus))`` failed prefixes.

    ``teacher`` is PolicyParams (evaluated on hint contexts carrying ``y_plus``) or a
    callable ``prefix -> probs``. Prefixes with zero fast-success value are skipped
    and counted in the report.
    """
    spec = fast_success(gamma)
    pi_fn = as_policy_fn(task, policy)
    q_fn = hinted_teacher_fn(task, teacher, y_plus) if isinstance(teacher, PolicyParams) else teacher
    values = exact_values(task, pi_fn, spec)
    k_minus = min(K, y_minus.stop_time)
    gains, rhs, skipped = [], [], 0
    for t in range(k_minus):
        s = tuple(y_minus.tokens[:t])
        v = values.v[s]
        if v <= 0:
            skipped += 1
            continue
        q_T = np.asarray(q_fn(s), dtype=np.float64)
        q_F = desirability_posterior(values, s)
        eps = teacher_error(q_T, q_F, values, s)
        v_edit = value_at(task, edited_policy(pi_fn, s, (1 - eta) * values.pi[s] + eta * q_T),
                          spec, s)
        gains.append(v_edit - v)
        rhs.append(eta * (_action_variance(values.pi[s], values.q[s]) / v - eps))
    slack = float(np.mean(gains) - np.mean(rhs)) if gains else float("nan")
    return TheoremReport("stopping_time_bound", slack,
                         _digest(task, policy, k_minus=k_minus, used=len(gains), gamma=gamma,
                                 eta=eta),
                         kind="bound", tol=BOUND_TOL, skipped=skipped)


def path_probabilities(task: TaskInstance, policy) -> dict:
    """Probability of reaching every node (terminal nodes included) from the root."""
    env = task.env
    pi_fn = as_policy_fn(task, policy)
    out = {(): 1.0}
    stack = [()]
    while stack:
        s = stack.pop()
        if env.is_terminal(s):
            continue
        probs = pi_fn(s)
        for a in range(env.n_actions):
            out[s + (a,)] = out[s] * float(probs[a])
            stack.append(s + (a,))
    return out


def branching_variance_identity(task: TaskInstance, policy) -> TheoremReport:
    """``p(1-p)`` against the path-weighted sum of per-state action-value variances.

    Terminated episodes are padded by an absorbing state whose variance is zero, so
    the depth-indexed sum reduces to a sum over nonterminal nodes.
    """
    pi_fn = as_policy_fn(task, policy)
    values = exact_values(task, pi_fn, BINARY)
    reach = path_probabilities(task, pi_fn)
    p = values.v[()]
    total = sum(reach[s] * _action_variance(values.pi[s], values.q[s]) for s in values.q)
    return TheoremReport("branching_variance_identity", abs(p * (1 - p) - total),
                         _digest(task, policy, p=p))


def pair_count_identity(G: int, p: float) -> TheoremReport:
    if G < 1 or not 0 <= p <= 1:
        raise ValueError("need G >= 1 and p in [0, 1]")
    exhaustive = math.fsum(math.comb(G, k) * p**k * (1 - p) ** (G - k) * k * (G - k)
                           for k in range(G + 1))
    closed = G * (G - 1) * p * (1 - p)
    return TheoremReport("pair_count_identity", abs(closed - exhaustive), {"G": G, "p": p},
                         tol=BINOMIAL_TOL)


def witness_weights(completion: Completion, gamma: float) -> tuple[float, float]:
    if not 0 < gamma < 1:
        raise ValueError("gamma must be in (0, 1)")
    g = gamma ** completion.stop_time
    if completion.reward == 1:
        return g, 0.0
    return 0.0, 1.0 - g


def ideal_prefix_distribution(task: TaskInstance, policy, gamma: float, K: int) -> dict:
    """Prefix distribution induced by persistent-failure weights over all completions."""
    reach = path_probabilities(task, policy)
    env = task.env
    mass: dict = {}
    norm = 0.0
    for y, prob in reach.items():
        if not env.is_terminal(y) or prob == 0.0:
            continue
        psi = (1 - verify(task, y)) * (1.0 - gamma ** len(y))
        if psi == 0.0:
            continue
        norm += prob * psi
        k_y = min(K, len(y))
        for t in range(k_y):
            mass[y[:t]] = mass.get(y[:t], 0.0) + prob * psi / k_y
    if norm <= 0.0:
        raise UndefinedDistribution("no failed completion has positive weight")
    return {s: m / norm for s, m in mass.items()}


def ideal_opsd_objective(task: TaskInstance, policy, student: PolicyParams, gamma: float, K: int,
                         details: bool = False):
    """Expected forward KL from the fast-success posterior to the student.

    Prefixes with zero fast-success value are dropped and the remaining mass is
    renormalized; ``details=True`` also returns the dropped mass.
    """
    pi_fn = as_policy_fn(task, policy)
    mu = ideal_prefix_distribution(task, pi_fn, gamma, K)
    values = exact_values(task, pi_fn, fast_success(gamma))
    total, used, dropped = 0.0, 0.0, 0.0
    for s, w in mu.items():
        if values.v[s] <= 0:
            dropped += w
            continue
        q_F = desirability_posterior(values, s)
        logp = distribution(student, state_context(task.prompt, s)).logprobs
        nz = q_F > 0
        total += w * float(q_F[nz] @ (np.log(q_F[nz]) - logp[nz]))
        used += w
    if used == 0.0:
        raise UndefinedDistribution("no prefix with positive fast-success value")
    value = total / used
    return (value, dropped) if details else value


def finite_difference_check(loss_fn, weights: np.ndarray, step: float = 1e-5,
                            n_coords: int = 50, rng: np.random.Generator | None = None) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``loss_fn(weights) -> (loss, grad)``. Coordinates with a nonzero analytic
    gradient are sampled first, then the remainder is filled at random.
    """
    if step <= 0:
        raise ValueError("step must be > 0")
    rng = np.random.default_rng(0) if rng is None else rng
    w = np.array(weights, dtype=np.float64)
    loss, grad = loss_fn(w)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    grad = np.asarray(grad).ravel()
    active = np.flatnonzero(grad)
    rest = np.setdiff1d(np.arange(w.size), active)
    n_active = min(len(active), n_coords)
    coords = list(rng.choice(active, n_active, replace=False)) if n_active else []
    n_fill = min(max(n_coords - n_active, 0), len(rest))
    if n_fill:
        coords += list(rng.choice(rest, n_fill, replace=False))
    worst = 0.0
    flat = w.ravel()
    for c in coords:
        orig = flat[c]
        flat[c] = orig + step
        up = loss_fn(w)[0]
        flat[c] = orig - step
        down = loss_fn(w)[0]
        flat[c] = orig
        numeric = (up - down) / (2 * step)
        analytic = grad[c]
        err = abs(numeric - analytic) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
