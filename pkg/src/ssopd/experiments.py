"""Experiment orchestration shared by the CLI and the acceptance suite."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .distill import CORRECT_RULES, WRONG_RULES, SelectorRule
from .policy import init_params, save_params
from .suites import frontier_suite
from .trainer import TrainResult, avg_at_k, train

log = logging.getLogger(__name__)

DIAGNOSTIC_COLUMNS = {
    "grpo": ["step", "prompt_id", "p_hat", "grpo_loss"],
    "ssopd": ["step", "prompt_id", "p_hat", "lambda_x", "len_plus", "len_minus", "k_minus",
              "grpo_loss", "ssopd_loss", "clip_rate"],
    "sft_ref": ["step", "prompt_id", "sft_loss"],
    "opsd_ref": ["step", "prompt_id", "p_hat", "opsd_loss", "clip_rate"],
}
METRIC_COLUMNS = ["step", "mean_reward", "mean_grpo_loss", "mean_ssopd_loss", "mean_lambda",
                  "frac_mixed_groups", "avg_at_k", "grad_norm"]


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return repr(round(float(value), 12))
    return value


def csv_text(columns, rows, config_digest: str) -> str:
    """CSV body preceded by one ``# config_digest=...`` comment line."""
    buf = io.StringIO()
    buf.write(f"# config_digest={config_digest}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def write_csv(path, columns, rows, config_digest: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(columns, rows, config_digest))
    return path


def read_csv(path) -> list[dict]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def stderr(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0


@dataclass
class Suites:
    train: list
    eval: list


def build_suites(cfg: ExperimentConfig) -> Suites:
    env = cfg.env_spec()
    s = cfg.suite
    kw = dict(family=s.family, moduli=(s.modulus_min, s.modulus_max),
              secret_len=(s.secret_len_min, s.secret_len_max), band=(s.band_low, s.band_high))
    return Suites(frontier_suite(env, s.n_train, s.train_seed, **kw),
                  frontier_suite(env, s.n_eval, s.eval_seed, **kw))


def initial_policy(cfg: ExperimentConfig, seed: int = 0):
    return init_params(cfg.env_spec(), cfg.env.feature_order, cfg.env.hint_strength, seed)


def run_training(cfg: ExperimentConfig, seed: int, suites: Suites, method: str | None = None,
                 **ssopd_overrides) -> TrainResult:
    method = cfg.train.method if method is None else method
    return train(suites.train, cfg.train_config(seed), cfg.grpo_config(),
                 cfg.ssopd_config(**ssopd_overrides), init=initial_policy(cfg, seed),
                 method=method, eval_tasks=suites.eval)


def final_score(cfg: ExperimentConfig, params, suites: Suites, seed: int) -> float:
    """Avg@k of a parameter state on the held-out suite with a fixed evaluation stream."""
    rng = np.random.default_rng([cfg.eval.seed, seed, 7])
    return avg_at_k(params, suites.eval, cfg.eval.k, rng)


def write_training_outputs(out: Path, cfg: ExperimentConfig, result: TrainResult, method: str,
                           seed: int):
    digest = cfg.digest()
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "metrics.csv", METRIC_COLUMNS, [asdict(m) for m in result.metrics], digest)
    write_csv(out / "diagnostics.csv", DIAGNOSTIC_COLUMNS[method], result.diagnostics, digest)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    for step, params in result.checkpoints:
        save_params(ckpt_dir / f"step_{step:05d}.npz", params, step=step, config_digest=digest,
                    method=method, train_seed=seed)
    save_params(out / "final.npz", result.params, step=len(result.metrics), config_digest=digest,
                method=method, train_seed=seed)


def write_suites(out: Path, suites: Suites, digest: str):
    out.mkdir(parents=True, exist_ok=True)
    for name, tasks in (("train", suites.train), ("eval", suites.eval)):
        lines = (json.dumps({**t.to_record(), "config_digest": digest}, sort_keys=True,
                            separators=(",", ":")) for t in tasks)
        (out / f"tasks_{name}.jsonl").write_text("".join(line + "\n" for line in lines))


@dataclass
class ComparisonResult:
    scores: dict  # method -> list of per-seed scores

    def mean(self, method) -> float:
        return float(np.mean(self.scores[method]))

    def stderr(self, method) -> float:
        return stderr(self.scores[method])


def _run_job(job):
    cfg, suites, seed, method, overrides, score_kind = job
    result = run_training(cfg, seed, suites, method=method, **overrides)
    if score_kind == "best":
        return result.best_checkpoint_score
    return final_score(cfg, result.params, suites, seed)


def _map_jobs(jobs, workers: int):
    # results come back in job order regardless of worker count
    if workers <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))


def _cell(scores) -> dict:
    return {"n_seeds": len(scores), "mean": float(np.mean(scores)), "stderr": stderr(scores),
            "scores": " ".join(f"{s:.6f}" for s in scores)}


def compare_methods(cfg: ExperimentConfig, methods=("grpo", "ssopd"), seeds=None,
                    suites: Suites | None = None, workers: int = 1) -> ComparisonResult:
    """Final held-out Avg@k per seed for each method, with seed-matched rollouts."""
    suites = build_suites(cfg) if suites is None else suites
    seeds = list(cfg.train.seeds if seeds is None else seeds)
    jobs = [(cfg, suites, s, m, {}, "final") for m in methods for s in seeds]
    flat = _map_jobs(jobs, workers)
    scores = {m: flat[i * len(seeds):(i + 1) * len(seeds)] for i, m in enumerate(methods)}
    return ComparisonResult(scores)


def selector_grid(cfg: ExperimentConfig, suites: Suites | None = None,
                  workers: int = 1) -> list[dict]:
    """Best checkpoint Avg@k for each of the 4 x 3 selector cells, seed-matched."""
    suites = build_suites(cfg) if suites is None else suites
    seeds = list(cfg.train.seeds)
    rules = [SelectorRule(c, w) for c in CORRECT_RULES for w in WRONG_RULES]
    jobs = [(cfg, suites, s, "ssopd", {"selector": r}, "best") for r in rules for s in seeds]
    flat = _map_jobs(jobs, workers)
    cells = []
    for i, rule in enumerate(rules):
        cells.append({"correct_rule": rule.correct_rule, "wrong_rule": rule.wrong_rule,
                      "is_default": rule.is_default,
                      **_cell(flat[i * len(seeds):(i + 1) * len(seeds)])})
    return cells


def frontier_grid(cfg: ExperimentConfig, suites: Suites | None = None,
                  workers: int = 1) -> list[dict]:
    """Final Avg@k for dynamic vs fixed weighting at each base coefficient."""
    suites = build_suites(cfg) if suites is None else suites
    seeds = list(cfg.train.seeds)
    arms = [(dyn, float(lam)) for dyn in (True, False) for lam in cfg.ablation.lambda0_values]
    jobs = [(cfg, suites, s, "ssopd", {"lambda0": lam, "dynamic_weight": dyn}, "final")
            for dyn, lam in arms for s in seeds]
    flat = _map_jobs(jobs, workers)
    cells = []
    for i, (dyn, lam) in enumerate(arms):
        cells.append({"weighting": "dynamic" if dyn else "fixed", "lambda0": lam,
                      **_cell(flat[i * len(seeds):(i + 1) * len(seeds)])})
    return cells


def grid_table(cells, row_key, col_key, rows, cols, flag=None) -> str:
    """Fixed-width text rendering of a grid of ``mean ± stderr`` cells."""
    lookup = {(c[row_key], c[col_key]): c for c in cells}
    width = 20
    lines = [f"{'':<14}" + "".join(f"{str(c):>{width}}" for c in cols)]
    for r in rows:
        parts = []
        for c in cols:
            cell = lookup[(r, c)]
            mark = "*" if flag and cell.get(flag) else " "
            parts.append(f"{cell['mean']:.4f} ± {cell['stderr']:.4f}{mark}".rjust(width))
        lines.append(f"{str(r):<14}" + "".join(parts))
    return "\n".join(lines)


def dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
