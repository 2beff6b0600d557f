"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line (printed in the "acceptance criteria"
section of the pytest summary) and then asserts, so a failing criterion stays red.
"""

import csv
import time
from pathlib import Path

import numpy as np
import pytest

from ssopd import verification as vf
from ssopd.cli import main
from ssopd.config import ExperimentConfig, load_config
from ssopd.distill import (
    CORRECT_RULES,
    WRONG_RULES,
    SelectorRule,
    SsopdConfig,
    combined_prompt_step,
    frontier_weight,
    opsd_pointwise_loss,
    select_witness,
    split_group,
    ssopd_prompt_loss,
)
from ssopd.env import Completion
from ssopd.experiments import build_suites, compare_methods, stderr
from ssopd.grpo import GrpoConfig, RolloutGroup, grpo_loss
from ssopd.oracle import finite_difference_check, witness_weights
from ssopd.policy import ActionDistribution, init_params, load_params, random_params

from helpers import group_of, mod_task, random_mixed_group, random_tokens, toy_policy

TINY = Path(__file__).parent / "data" / "tiny.ini"
GAMMAS = (0.5, 0.9, 0.99)
ETAS = (0.1, 0.5, 0.9)
N = 200


def _summary(records):
    return vf.summarize(records)


def _all_pass(records):
    return all(r.report.passed is not False for r in records)


def test_criterion_01_local_edit_identity(criterion):
    t0 = time.perf_counter()
    records = vf.sweep_local_edit(N, 0, GAMMAS, ETAS)
    elapsed = time.perf_counter() - t0
    worst = max(r.report.residual_or_slack for r in records)
    ok = len(records) >= N and worst < 1e-9 and elapsed < 60
    criterion(1, ok, f"local edit identity: n={len(records)} worst residual={worst:.2e} "
                     f"({elapsed:.1f}s)")
    assert ok


def test_criterion_02_edit_and_stopping_bounds(criterion):
    t0 = time.perf_counter()
    approx = vf.sweep_approx_edit(N, 0, GAMMAS, ETAS)
    stop = vf.sweep_stopping_bound(N, 0, GAMMAS, ETAS)
    elapsed = time.perf_counter() - t0
    s = _summary(approx + stop)
    bounds = [s["approx_edit_bound"], s["stopping_time_bound"]]
    tight = [s["approx_edit_tight"], s["stopping_time_tight"]]
    min_slack = min(b["worst"] for b in bounds)
    max_tight = max(t["worst"] for t in tight)
    n_bound = min(b["passed"] + b["failed"] for b in bounds)
    skipped = sum(b["skipped_prefixes"] for b in bounds)
    ok = (_all_pass(approx + stop) and n_bound >= N and min_slack >= -1e-9
          and max_tight < 1e-9 and elapsed < 120)
    criterion(2, ok, f"bounds: n>={n_bound} min slack={min_slack:.2e}, posterior-teacher "
                     f"|slack|<={max_tight:.2e}, skipped V=0 prefixes={skipped} ({elapsed:.1f}s)")
    assert ok


def test_criterion_03_branching_variance_and_pair_count(criterion):
    t0 = time.perf_counter()
    branch = vf.sweep_branching_variance(N, 0)
    pairs = vf.sweep_pair_count()
    elapsed = time.perf_counter() - t0
    b = max(r.report.residual_or_slack for r in branch)
    p = max(r.report.residual_or_slack for r in pairs)
    ok = len(branch) >= N and len(pairs) == 11 * 9 and b < 1e-9 and p < 1e-12 and elapsed < 60
    criterion(3, ok, f"branching variance worst={b:.2e} (n={len(branch)}), pair count "
                     f"worst={p:.2e} over G=2..12 x p=0.1..0.9 ({elapsed:.1f}s)")
    assert ok


def test_criterion_04_gradients_match_finite_differences(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_grpo = worst_ssopd = 0.0
    n_clipped = 0
    for i in range(100):
        task = mod_task(m=int(rng.integers(2, 6)), t=1, vocab=3, H=4, seed=i)
        behavior = toy_policy(task.env, 1000 + i)
        group = random_mixed_group(rng, task, behavior, G=int(rng.integers(2, 7)))
        student = behavior.replace(behavior.weights
                                   + rng.normal(0, 0.15, behavior.weights.shape))
        gcfg = GrpoConfig(group_size=len(group), beta=float(rng.choice([0.0, 0.1])))
        fn = lambda w: grpo_loss(group, student.replace(w), behavior, gcfg)  # noqa: E731
        worst_grpo = max(worst_grpo, finite_difference_check(fn, student.weights, 1e-5, rng=rng))

        pair = select_witness(*split_group(group))
        teacher = init_params(task.env, hint_strength=float(rng.uniform(0.5, 4.0)))
        teacher = teacher.replace(teacher.weights + rng.normal(0, 0.3, teacher.weights.shape))
        scfg = SsopdConfig(tau_clip=float(rng.choice([0.01, 0.05, 0.2])))
        _, _, rates = ssopd_prompt_loss(task, pair, teacher, student, scfg, return_clip_rates=True)
        n_clipped += any(r > 0 for r in rates)
        fn = lambda w: ssopd_prompt_loss(task, pair, teacher, student.replace(w), scfg)  # noqa: E731
        worst_ssopd = max(worst_ssopd,
                          finite_difference_check(fn, student.weights, 1e-5, rng=rng))
    elapsed = time.perf_counter() - t0
    ok = worst_grpo < 1e-4 and worst_ssopd < 1e-4 and n_clipped > 0 and elapsed < 120
    criterion(4, ok, f"max rel FD error grpo={worst_grpo:.2e} ssopd={worst_ssopd:.2e} over 100 "
                     f"instances each, {n_clipped} with active clipping ({elapsed:.1f}s)")
    assert ok


def test_criterion_05_frontier_gating(criterion):
    rng = np.random.default_rng(5)
    n_pure = 0
    bitwise = True
    for i in range(200):
        task = mod_task(m=3, t=1, vocab=3, H=4, seed=i)
        behavior = toy_policy(task.env, i)
        G = int(rng.integers(2, 9))
        toks = [random_tokens(rng, task.env) for _ in range(G)]
        if rng.random() < 0.5:
            toks = [task.reference_solution] * G
        group = group_of(task, toks, behavior)
        if 0 < group.rewards.sum() < G:
            continue
        n_pure += 1
        student = behavior.replace(behavior.weights + rng.normal(0, 0.1, behavior.weights.shape))
        teacher = init_params(task.env, hint_strength=2.0)
        g_loss, g_grad = grpo_loss(group, student, None, GrpoConfig(group_size=G))
        for dynamic in (True, False):
            loss, grad, diag = combined_prompt_step(task, group, GrpoConfig(group_size=G),
                                                    SsopdConfig(dynamic_weight=dynamic),
                                                    teacher, student)
            bitwise &= (diag.lambda_x == 0.0 and loss == g_loss
                        and np.array_equal(grad, g_grad))
    half = frontier_weight([1, 0] * 4, 0.5)
    ok = bitwise and n_pure >= 100 and half == 0.5
    criterion(5, ok, f"{n_pure} pure groups: lambda_x=0 and bit-identical GRPO gradient="
                     f"{bitwise}; lambda_x(p=0.5, lambda0=0.5)={half!r}")
    assert ok


def _dist(probs):
    probs = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return ActionDistribution(probs, np.log(probs))


def test_criterion_06_pointwise_loss_definition(criterion):
    rng = np.random.default_rng(6)
    zero_ok = bounded_ok = True
    for _ in range(2000):
        n = int(rng.integers(2, 6))
        p = _dist(rng.dirichlet(np.full(n, 0.5)))
        q = _dist(rng.dirichlet(np.full(n, 0.5)))
        zero_ok &= opsd_pointwise_loss(p, p, 0.05)[0] == 0.0
        kl = float(np.sum(q.probs * (q.logprobs - p.logprobs)))
        bounded_ok &= opsd_pointwise_loss(q, p, float(rng.uniform(1e-3, 1.0)))[0] <= kl + 1e-15
    point = _dist([1.0, 0.0])
    student = ActionDistribution(np.array([np.exp(-10.0), 1 - np.exp(-10.0)]),
                                 np.array([-10.0, np.log1p(-np.exp(-10.0))]))
    pm = opsd_pointwise_loss(point, student, 0.05)[0]
    ok = zero_ok and bounded_ok and pm == 0.05
    criterion(6, ok, f"zero at q_T=p: {zero_ok}; clipped<=KL on 2000 draws: {bounded_ok}; "
                     f"point mass at log p=-10 gives {pm!r}")
    assert ok


def test_criterion_07_selector_conformance(criterion):
    rng = np.random.default_rng(7)
    checked = 0
    ok = True
    for _ in range(2000):
        G = int(rng.integers(2, 9))
        lengths = rng.choice(np.arange(1, 13), size=G, replace=False)
        rewards = rng.integers(0, 2, size=G)
        if rewards.sum() in (0, G):
            continue
        comps = [Completion((1,) * (int(n) - 1) + (0,), int(r), (-1.0,) * int(n))
                 for n, r in zip(lengths, rewards)]
        group = RolloutGroup.from_completions((20,), comps)
        correct, wrong = split_group(group)
        pair = select_witness(correct, wrong, SelectorRule("Len_min", "Len_max"), prefix_budget=12)
        gamma = float(rng.uniform(0.5, 0.99))
        best_f = max(correct, key=lambda ic: witness_weights(ic[1], gamma)[0])
        best_p = max(wrong, key=lambda ic: witness_weights(ic[1], gamma)[1])
        ok &= best_f[0] == pair.plus_index and best_p[0] == pair.minus_index
        checked += 1
    ok = ok and checked >= 1000
    criterion(7, ok, f"argmax w_F = shortest correct and argmax w_P = longest wrong on "
                     f"{checked} random distinct-length groups")
    assert ok


@pytest.mark.slow
def test_criterion_08_directional_training(criterion):
    cfg = ExperimentConfig()
    assert cfg.suite.family == "modular_sum" and cfg.suite.n_train >= 200
    assert cfg.grpo.group_size == 8 and cfg.train.steps == 300 and len(cfg.train.seeds) == 10
    assert cfg.eval.k == 12
    t0 = time.perf_counter()
    res = compare_methods(cfg, ("grpo", "ssopd"), suites=build_suites(cfg))
    elapsed = time.perf_counter() - t0
    g, s = res.scores["grpo"], res.scores["ssopd"]
    diff = np.subtract(s, g)
    ok = res.mean("ssopd") >= res.mean("grpo")
    criterion(8, ok, f"Avg@12 ssopd={res.mean('ssopd'):.4f}±{res.stderr('ssopd'):.4f} "
                     f"grpo={res.mean('grpo'):.4f}±{res.stderr('grpo'):.4f} "
                     f"(paired diff {diff.mean():+.4f}±{stderr(diff):.4f}, "
                     f"ssopd ahead on {int((diff > 0).sum())}/10 seeds, {elapsed / 60:.1f} min)")
    assert ok


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def test_criterion_09_ablation_grids(criterion, tmp_path):
    assert main(["ablate-selectors", "--config", str(TINY), "--out", str(tmp_path / "s")]) == 0
    assert main(["ablate-frontier", "--config", str(TINY), "--out", str(tmp_path / "f")]) == 0
    sel = _rows(tmp_path / "s" / "selector_grid.csv")
    fro = _rows(tmp_path / "f" / "frontier_grid.csv")
    seeds = len(load_config(TINY).train.seeds)
    sel_cells = {(r["correct_rule"], r["wrong_rule"]) for r in sel}
    fro_cells = {(r["weighting"], float(r["lambda0"])) for r in fro}
    ok = (len(sel) == 12 and sel_cells == {(c, w) for c in CORRECT_RULES for w in WRONG_RULES}
          and [r["is_default"] for r in sel].count("True") == 1
          and len(fro) == 8
          and fro_cells == {(w, x) for w in ("dynamic", "fixed") for x in (0.4, 0.5, 0.6, 0.7)}
          and {int(r["n_seeds"]) for r in sel + fro} == {seeds})
    criterion(9, ok, f"selector grid {len(sel)} cells (4x3), frontier grid {len(fro)} cells "
                     f"(2x4), every cell over the same {seeds} seeds")
    assert ok


def _bodies(root):
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.suffix in (".csv", ".jsonl"):
            out[str(p.relative_to(root))] = p.read_bytes()
    return out


def test_criterion_10_reproducibility(criterion, tmp_path):
    commands = [["train"], ["verify-theorems"], ["compare"], ["ablate-frontier"]]
    identical = True
    for cmd in commands:
        for run in ("a", "b"):
            assert main(cmd + ["--config", str(TINY), "--out", str(tmp_path / cmd[0] / run)]) == 0
        a, b = _bodies(tmp_path / cmd[0] / "a"), _bodies(tmp_path / cmd[0] / "b")
        identical &= bool(a) and a == b
    finals = sorted((tmp_path / "train" / "a").rglob("final.npz"))
    same_params = bool(finals) and all(
        np.array_equal(load_params(p)[0].weights,
                       load_params(tmp_path / "train" / "b" / p.relative_to(tmp_path / "train" / "a"))[0].weights)
        for p in finals)
    ok = identical and same_params
    criterion(10, ok, f"byte-identical CSV/JSONL bodies across reruns of "
                      f"{', '.join(c[0] for c in commands)}: {identical}; identical final "
                      f"parameters ({len(finals)} seeds): {same_params}")
    assert ok
