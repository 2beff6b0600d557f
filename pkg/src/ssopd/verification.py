"""Randomized sweeps that run every oracle check on small enumerable instances."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import oracle
from .distill import SelectorRule, select_witness, split_group
from .env import EnvSpec, make_task
from .grpo import RolloutGroup
from .oracle import DesirabilitySpec, TheoremReport, ZeroValueState, fast_success
from .policy import init_params, random_params, sample_completion


@dataclass(frozen=True)
class SweepRecord:
    report: TheoremReport
    seed: int

    @property
    def instance_digest(self) -> str:
        blob = json.dumps(self.report.inputs_digest, sort_keys=True, default=str)
        return hashlib.sha1(blob.encode()).hexdigest()[:12]

    def to_json(self, config_digest: str = "") -> dict:
        r = self.report
        return {
            "name": r.name,
            "residual_or_slack": r.residual_or_slack if np.isfinite(r.residual_or_slack) else None,
            "seed": self.seed,
            "instance_digest": self.instance_digest,
            "pass": r.passed,
            "skipped_prefixes": r.skipped,
            "config_digest": config_digest,
        }


def random_task(rng: np.random.Generator, max_actions: int = 3, max_horizon: int = 5):
    """A random solvable task with at most ``max_actions`` sampleable tokens."""
    while True:
        V = int(rng.integers(1, max_actions))
        H = int(rng.integers(1, max_horizon + 1))
        params = {"vocab": V, "H": H, "prompt_symbols": 8}
        if rng.random() < 0.5:
            params["m"] = int(rng.integers(2, 6))
            family = "modular_sum"
        else:
            params["secret_len"] = int(rng.integers(1, min(H, 3) + 1))
            family = "subsequence_lock"
        try:
            return make_task(family, params, int(rng.integers(2**31)))
        except ValueError:
            continue


def random_instance(rng, max_actions=3, max_horizon=5):
    task = random_task(rng, max_actions, max_horizon)
    policy = random_params(task.env, rng, scale=float(rng.uniform(0.2, 2.0)))
    return task, policy


def random_desirability(task, rng, gammas) -> DesirabilitySpec:
    kind = rng.integers(3)
    if kind == 0:
        return oracle.BINARY
    if kind == 1:
        return fast_success(float(rng.choice(gammas)))
    from .env import enumerate_completions
    table = {y: float(rng.exponential()) * (rng.random() < 0.6) for y, _ in enumerate_completions(task)}
    return DesirabilitySpec("custom_table", table=table)


def _positive_state(values, rng):
    states = sorted(s for s, v in values.v.items() if v > 0)
    if not states:
        return None
    return states[int(rng.integers(len(states)))]


def _mixed_pair(task, policy, rng, group_size=8, tries=20):
    for _ in range(tries):
        comps = [sample_completion(policy, task, rng, 1.0) for _ in range(group_size)]
        correct, wrong = split_group(RolloutGroup.from_completions(task.prompt, comps))
        pair = select_witness(correct, wrong, SelectorRule(), prefix_budget=task.env.horizon)
        if pair is not None:
            return pair
    return None


def sweep_local_edit(n, seed, gammas, etas, max_actions=3, max_horizon=5):
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, 31, i])
        while True:
            task, policy = random_instance(rng, max_actions, max_horizon)
            spec = random_desirability(task, rng, gammas)
            state = _positive_state(oracle.exact_values(task, policy, spec), rng)
            if state is not None:
                break
        eta = float(rng.choice(etas))
        out.append(SweepRecord(oracle.check_theorem_local_edit(task, policy, spec, state, eta), i))
    return out


def sweep_approx_edit(n, seed, gammas, etas, max_actions=3, max_horizon=5):
    """Random teachers (bounds) plus the posterior teacher (tightness) per instance."""
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, 41, i])
        while True:
            task, policy = random_instance(rng, max_actions, max_horizon)
            spec = random_desirability(task, rng, gammas)
            values = oracle.exact_values(task, policy, spec)
            state = _positive_state(values, rng)
            if state is not None:
                break
        eta = float(rng.choice(etas))
        q_T = rng.dirichlet(np.full(task.env.n_actions, float(rng.uniform(0.2, 3.0))))
        out.append(SweepRecord(oracle.check_approx_edit(task, policy, spec, state, q_T, eta), i))
        q_phi = oracle.desirability_posterior(values, state)
        tight = oracle.check_approx_edit(task, policy, spec, state, q_phi, eta)
        out.append(SweepRecord(TheoremReport("approx_edit_tight", abs(tight.residual_or_slack),
                                             tight.inputs_digest), i))
    return out


def sweep_stopping_bound(n, seed, gammas, etas, max_actions=3, max_horizon=5):
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, 51, i])
        pair = None
        while pair is None:
            task, policy = random_instance(rng, max_actions, max_horizon)
            pair = _mixed_pair(task, policy, rng)
        gamma = float(rng.choice(gammas))
        eta = float(rng.choice(etas))
        K = int(rng.integers(1, task.env.horizon + 1))
        teacher = random_params(task.env, rng, scale=float(rng.uniform(0.2, 2.0)))
        out.append(SweepRecord(oracle.check_stopping_bound(task, policy, pair.y_plus, pair.y_minus,
                                                           gamma, eta, K, teacher), i))
        values = oracle.exact_values(task, policy, fast_success(gamma))
        posterior = lambda s, values=values: oracle.desirability_posterior(values, s)  # noqa: E731
        tight = oracle.check_stopping_bound(task, policy, pair.y_plus, pair.y_minus, gamma, eta, K,
                                            posterior)
        out.append(SweepRecord(TheoremReport("stopping_time_tight", abs(tight.residual_or_slack),
                                             tight.inputs_digest, skipped=tight.skipped), i))
    return out


def sweep_stopping_bound_trained(n, seed, gammas, etas):
    """Bound checked at successive parameter states of a short modular_sum training run."""
    from .grpo import GrpoConfig
    from .suites import frontier_suite
    from .trainer import TrainConfig, train

    if n <= 0:
        return []
    env = EnvSpec(vocab_size=2, horizon=4, prompt_symbols=8)
    tasks = frontier_suite(env, 8, seed, moduli=(2, 5))
    init = init_params(env, hint_strength=2.0)
    cfg = TrainConfig(steps=n, batch_size=4, learning_rate=0.05, seed=seed,
                      eval_every=0, checkpoint_every=1)
    result = train(tasks, cfg, GrpoConfig(group_size=4), init=init, method="ssopd")
    out = []
    for i, (_, params) in enumerate(result.checkpoints[:n]):
        rng = np.random.default_rng([seed, 61, i])
        pair = None
        for _ in range(10):
            task = tasks[int(rng.integers(len(tasks)))]
            pair = _mixed_pair(task, params, rng)
            if pair is not None:
                break
        if pair is None:
            continue
        report = oracle.check_stopping_bound(task, params, pair.y_plus, pair.y_minus,
                                             float(rng.choice(gammas)), float(rng.choice(etas)),
                                             int(rng.integers(1, env.horizon + 1)), init)
        out.append(SweepRecord(TheoremReport("stopping_time_bound_trained", report.residual_or_slack,
                                             report.inputs_digest, "bound", report.tol,
                                             report.skipped), i))
    return out


def sweep_branching_variance(n, seed, max_actions=3, max_horizon=5):
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, 71, i])
        task, policy = random_instance(rng, max_actions, max_horizon)
        out.append(SweepRecord(oracle.branching_variance_identity(task, policy), i))
    return out


def sweep_pair_count():
    out = []
    for G in range(2, 13):
        for p in np.round(np.arange(0.1, 0.91, 0.1), 10):
            out.append(SweepRecord(oracle.pair_count_identity(G, float(p)), G))
    return out


def run_all(n=200, seed=0, gammas=(0.5, 0.9, 0.99), etas=(0.1, 0.5, 0.9), max_actions=3,
            max_horizon=5, trained_checkpoints=100) -> list[SweepRecord]:
    records = []
    records += sweep_local_edit(n, seed, gammas, etas, max_actions, max_horizon)
    records += sweep_approx_edit(n, seed, gammas, etas, max_actions, max_horizon)
    records += sweep_stopping_bound(n, seed, gammas, etas, max_actions, max_horizon)
    records += sweep_stopping_bound_trained(trained_checkpoints, seed, gammas, etas)
    records += sweep_branching_variance(n, seed, max_actions, max_horizon)
    records += sweep_pair_count()
    return records


def summarize(records) -> dict:
    summary: dict = {}
    for rec in records:
        s = summary.setdefault(rec.report.name, {"n": 0, "passed": 0, "failed": 0,
                                                 "skipped_instances": 0, "skipped_prefixes": 0,
                                                 "worst": None})
        s["n"] += 1
        s["skipped_prefixes"] += rec.report.skipped
        ok = rec.report.passed
        if ok is None:
            s["skipped_instances"] += 1
            continue
        s["passed" if ok else "failed"] += 1
        val = rec.report.residual_or_slack
        if rec.report.kind == "identity":
            s["worst"] = val if s["worst"] is None else max(s["worst"], val)
        else:
            s["worst"] = val if s["worst"] is None else min(s["worst"], val)
    return summary


__all__ = ["SweepRecord", "run_all", "summarize", "random_instance", "random_task", "ZeroValueState"]
