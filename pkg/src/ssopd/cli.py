"""Command-line front end.

Every subcommand reads an INI config (defaults apply when ``--config`` is
omitted), writes the resolved config next to its outputs and stamps the config
digest into each file it writes.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .config import ConfigError, ExperimentConfig, load_config
from .distill import CORRECT_RULES, WRONG_RULES
from .env import EnumerationBudgetError
from .policy import load_params
from .trainer import METHODS, NonFiniteLossError, avg_at_k
from .verification import run_all, summarize

log = logging.getLogger("ssopd")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.train.seeds = (args.seed,)
        cfg.verify.seed = args.seed
        cfg.eval.seed = args.seed
    if getattr(args, "method", None):
        cfg.train.method = args.method
    if getattr(args, "checkpoint", None):
        cfg.eval.checkpoint = str(args.checkpoint)
    if getattr(args, "k", None) is not None:
        cfg.eval.k = args.k
    return cfg


def _prepare_out(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(f"# config_digest={cfg.digest()}\n" + cfg.to_ini())
    return out


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(args, cfg)
    suites = ex.build_suites(cfg)
    ex.write_suites(out, suites, cfg.digest())
    method = cfg.train.method
    multi = len(cfg.train.seeds) > 1
    rows = []
    for seed in cfg.train.seeds:
        result = ex.run_training(cfg, seed, suites, method=method)
        run_dir = out / f"seed_{seed}" if multi else out
        ex.write_training_outputs(run_dir, cfg, result, method, seed)
        score = ex.final_score(cfg, result.params, suites, seed)
        rows.append({"seed": seed, "method": method, "avg_at_k": score})
        print(f"seed {seed} {method}: final Avg@{cfg.eval.k} = {score:.4f}")
    ex.write_csv(out / "final_scores.csv", ["seed", "method", "avg_at_k"], rows, cfg.digest())
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    if not cfg.eval.checkpoint:
        raise ConfigError("eval needs a checkpoint (--checkpoint or [eval] checkpoint)")
    params, header = load_params(cfg.eval.checkpoint)
    if (params.env.vocab_size, params.env.horizon) != (cfg.env.vocab_size, cfg.env.horizon):
        raise ConfigError("checkpoint environment does not match the config")
    out = _prepare_out(args, cfg)
    suites = ex.build_suites(cfg)
    rng = np.random.default_rng([cfg.eval.seed, 11])
    score = avg_at_k(params, suites.eval, cfg.eval.k, rng)
    ex.write_csv(out / "eval.csv", ["checkpoint", "step", "k", "n_tasks", "avg_at_k"],
                 [{"checkpoint": Path(cfg.eval.checkpoint).name, "step": header.get("step"),
                   "k": cfg.eval.k, "n_tasks": len(suites.eval), "avg_at_k": score}],
                 cfg.digest())
    print(f"Avg@{cfg.eval.k} = {score:.6f} over {len(suites.eval)} held-out tasks")
    return EXIT_OK


def cmd_verify_theorems(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(args, cfg)
    v = cfg.verify
    records = run_all(v.n_instances, v.seed, v.gammas, v.etas, v.max_actions, v.max_horizon,
                      v.trained_checkpoints)
    digest = cfg.digest()
    with open(out / "theorems.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(digest), sort_keys=True) + "\n")
    summary = summarize(records)
    failed = 0
    for name, s in summary.items():
        failed += s["failed"]
        worst = "n/a" if s["worst"] is None else f"{s['worst']:.3e}"
        print(f"{name:<30} n={s['n']:<4} pass={s['passed']:<4} fail={s['failed']:<3} "
              f"skipped_instances={s['skipped_instances']:<3} "
              f"skipped_prefixes={s['skipped_prefixes']:<4} worst={worst}")
    print("ALL CHECKS PASSED" if failed == 0 else f"{failed} CHECK(S) FAILED")
    return EXIT_OK if failed == 0 else EXIT_FAIL


def cmd_ablate_selectors(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(args, cfg)
    cells = ex.selector_grid(cfg, workers=args.workers)
    ex.write_csv(out / "selector_grid.csv",
                 ["correct_rule", "wrong_rule", "is_default", "n_seeds", "mean", "stderr",
                  "scores"], cells, cfg.digest())
    print(f"best-checkpoint Avg@{cfg.train.eval_k} (rows: correct rule, columns: wrong rule; "
          "* marks the default)")
    print(ex.grid_table(cells, "correct_rule", "wrong_rule", CORRECT_RULES, WRONG_RULES,
                        flag="is_default"))
    return EXIT_OK


def cmd_ablate_frontier(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(args, cfg)
    cells = ex.frontier_grid(cfg, workers=args.workers)
    ex.write_csv(out / "frontier_grid.csv",
                 ["weighting", "lambda0", "n_seeds", "mean", "stderr", "scores"], cells,
                 cfg.digest())
    lams = [float(x) for x in cfg.ablation.lambda0_values]
    print(f"final Avg@{cfg.eval.k} (rows: weighting, columns: lambda0)")
    print(ex.grid_table(cells, "weighting", "lambda0", ["dynamic", "fixed"], lams))
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _resolve(args)
    out = _prepare_out(args, cfg)
    methods = tuple(args.methods.split(","))
    res = ex.compare_methods(cfg, methods, workers=args.workers)
    rows = [{"seed": s, **{m: res.scores[m][i] for m in methods}}
            for i, s in enumerate(cfg.train.seeds)]
    ex.write_csv(out / "compare.csv", ["seed", *methods], rows, cfg.digest())
    for m in methods:
        print(f"{m:<9} mean Avg@{cfg.eval.k} = {res.mean(m):.4f} ± {res.stderr(m):.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssopd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, workers=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="INI config file")
        p.add_argument("--seed", type=int, help="replace the configured seed list with one seed")
        p.add_argument("--out", default=f"runs/{name}", help="output directory")
        if workers:
            p.add_argument("--workers", type=int, default=1, help="parallel training processes")
        p.set_defaults(func=fn)
        return p

    p = add("train", cmd_train, "train one method over the seed list")
    p.add_argument("--method", choices=METHODS)
    p = add("eval", cmd_eval, "score a checkpoint on the held-out suite")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--k", type=int)
    add("verify-theorems", cmd_verify_theorems, "run every exact check on random instances")
    add("ablate-selectors", cmd_ablate_selectors, "4 x 3 witness selector grid", workers=True)
    add("ablate-frontier", cmd_ablate_frontier, "dynamic vs fixed weighting grid", workers=True)
    p = add("compare", cmd_compare, "seed-matched comparison of training methods", workers=True)
    p.add_argument("--methods", default="grpo,ssopd")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLossError, EnumerationBudgetError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
