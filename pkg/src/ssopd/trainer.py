"""Training loop over prompt minibatches and the Avg@k metric."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .distill import (
    SsopdConfig,
    StepDiagnostics,
    build_hint,
    combined_prompt_step,
    opsd_pointwise_loss,
    teacher_distribution,
)
from .env import TaskInstance
from .grpo import GrpoConfig, RolloutGroup, grpo_loss
from .policy import (
    Context,
    PolicyParams,
    dist_from_features,
    featurize,
    sample_completion,
    snapshot,
)

log = logging.getLogger(__name__)

METHODS = ("grpo", "ssopd", "sft_ref", "opsd_ref")


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    batch_size: int = 16
    learning_rate: float = 1e-2
    optimizer: str = "adam"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    teacher_mode: str = "fixed_initial"
    inner_epochs: int = 1
    temperature: float = 1.2
    eval_every: int = 50
    eval_k: int = 12
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.steps < 1 or self.inner_epochs < 1 or self.batch_size < 1:
            raise ValueError("steps, batch_size and inner_epochs must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.teacher_mode not in ("fixed_initial", "live_stop_gradient"):
            raise ValueError(f"unknown teacher_mode {self.teacher_mode!r}")


@dataclass(frozen=True)
class MetricsRow:
    step: int
    mean_reward: float
    mean_grpo_loss: float
    mean_ssopd_loss: float
    mean_lambda: float
    frac_mixed_groups: float
    avg_at_k: float | None
    grad_norm: float


@dataclass
class OptimizerState:
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


@dataclass
class TrainResult:
    params: PolicyParams
    metrics: list[MetricsRow]
    diagnostics: list[dict]
    checkpoints: list[tuple[int, PolicyParams]] = field(default_factory=list)
    checkpoint_scores: list[tuple[int, float]] = field(default_factory=list)

    @property
    def best_checkpoint_score(self) -> float:
        return max(s for _, s in self.checkpoint_scores)


def apply_update(params: PolicyParams, gradient: np.ndarray, cfg: TrainConfig,
                 state: OptimizerState | None = None) -> tuple[PolicyParams, OptimizerState]:
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != params.weights.shape:
        raise ValueError(f"gradient shape {g.shape} != {params.weights.shape}")
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient")
    state = OptimizerState() if state is None else state
    lr = cfg.learning_rate
    if cfg.optimizer == "sgd":
        return params.replace(params.weights - lr * g), OptimizerState(state.t + 1)
    b1, b2 = cfg.adam_betas
    t = state.t + 1
    m = (1 - b1) * g if state.m is None else b1 * state.m + (1 - b1) * g
    v = (1 - b2) * g * g if state.v is None else b2 * state.v + (1 - b2) * g * g
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    step = lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return params.replace(params.weights - step), OptimizerState(t, m, v)


def avg_at_k(policy: PolicyParams, tasks, k: int, rng: np.random.Generator,
             temperature: float = 1.0) -> float:
    """Mean over tasks of the fraction of ``k`` samples that verify."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = [np.mean([sample_completion(policy, task, rng, temperature).reward for _ in range(k)])
              for task in tasks]
    return float(np.mean(scores))


def sft_loss(task: TaskInstance, student: PolicyParams) -> tuple[float, np.ndarray]:
    """Token-averaged cross-entropy on the task's reference solution."""
    y = task.reference_solution
    grad = np.zeros_like(student.weights)
    total = 0.0
    for t, a in enumerate(y):
        idx = featurize(Context(task.prompt + y[:t]), student.env, student.feature_order)
        d = dist_from_features(student, idx)
        total -= d.logprobs[a]
        g = d.probs.copy()
        g[a] -= 1.0
        grad[idx] += g / len(y)
    return total / len(y), grad


def opsd_ref_loss(task: TaskInstance, completions, teacher: PolicyParams, student: PolicyParams,
                  cfg: SsopdConfig):
    """Clipped distillation at student-rollout prefixes with the reference solution as hint."""
    grad = np.zeros_like(student.weights)
    total, rates = 0.0, []
    for comp in completions:
        k = min(cfg.prefix_budget, comp.stop_time)
        for t in range(k):
            prefix = comp.tokens[:t]
            q = teacher_distribution(teacher, build_hint(task.prompt, prefix,
                                                         task.reference_solution, task.env))
            idx = featurize(Context(task.prompt + prefix), student.env, student.feature_order)
            p = dist_from_features(student, idx)
            loss, g_logp, clipped = opsd_pointwise_loss(q, p, cfg.tau_clip)
            w = 1.0 / (k * len(completions))
            total += w * loss
            grad[idx] += w * (g_logp - p.probs * g_logp.sum())
            rates.append(float(clipped.sum()) / max(int((q.probs > 0).sum()), 1))
    return total, grad, float(np.mean(rates)) if rates else 0.0


def _digest_task(task: TaskInstance) -> str:
    return hashlib.sha1(task.to_json().encode()).hexdigest()[:12]


def _step_rng(seed: int, step: int, stream: int) -> np.random.Generator:
    # one independent stream per (seed, step, purpose): arms sharing a seed share rollout noise
    return np.random.default_rng([seed, step, stream])


def train(tasks, cfg: TrainConfig, grpo_cfg: GrpoConfig = GrpoConfig(),
          ssopd_cfg: SsopdConfig = SsopdConfig(), init: PolicyParams | None = None,
          method: str = "ssopd", eval_tasks=None, reference: PolicyParams | None = None) -> TrainResult:
    """Run the training loop; deterministic given ``cfg.seed``.

    ``method="grpo"`` drops the distillation term entirely. ``sft_ref`` and
    ``opsd_ref`` are the privileged baselines that read the reference solution.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    tasks = list(tasks)
    if init is None:
        raise ValueError("train needs initial parameters")
    params = init
    initial = snapshot(init)
    reference = initial if reference is None else reference
    opt_state = OptimizerState()
    metrics: list[MetricsRow] = []
    diagnostics: list[dict] = []
    checkpoints: list[tuple[int, PolicyParams]] = []
    checkpoint_scores: list[tuple[int, float]] = []
    n_batch = min(cfg.batch_size, len(tasks))

    def evaluate(step_params):
        return avg_at_k(step_params, eval_tasks, cfg.eval_k, _step_rng(cfg.seed, 0, 99))

    for step in range(1, cfg.steps + 1):
        behavior = snapshot(params)
        teacher = initial if cfg.teacher_mode == "fixed_initial" else behavior
        batch_ids = _step_rng(cfg.seed, step, 0).choice(len(tasks), n_batch, replace=False)
        rollout_rng = _step_rng(cfg.seed, step, 1)
        groups = []
        for i in batch_ids:
            task = tasks[i]
            comps = [sample_completion(behavior, task, rollout_rng, cfg.temperature)
                     for _ in range(grpo_cfg.group_size)]
            groups.append((int(i), task, RolloutGroup.from_completions(task.prompt, comps,
                                                                       grpo_cfg.epsilon_r)))

        for epoch in range(cfg.inner_epochs):
            grad = np.zeros_like(params.weights)
            rows = []
            for i, task, group in groups:
                row = _prompt_step(method, task, group, grpo_cfg, ssopd_cfg, teacher, params,
                                   reference)
                if not math.isfinite(row["loss"]):
                    raise NonFiniteLossError(f"non-finite loss at step {step} on prompt "
                                             f"{_digest_task(task)}")
                grad += row.pop("grad") / len(groups)
                row.update(step=step, prompt_id=i)
                rows.append(row)
            params, opt_state = apply_update(params, grad, cfg, opt_state)

        diagnostics.extend(rows)
        rewards = [float(g.rewards.mean()) for _, _, g in groups]
        score = None
        if eval_tasks is not None and cfg.eval_every and step % cfg.eval_every == 0:
            score = evaluate(params)
        if cfg.checkpoint_every and (step % cfg.checkpoint_every == 0 or step == cfg.steps):
            checkpoints.append((step, params))
            if eval_tasks is not None:
                checkpoint_scores.append((step, score if score is not None else evaluate(params)))
        metrics.append(MetricsRow(
            step=step,
            mean_reward=float(np.mean(rewards)),
            mean_grpo_loss=float(np.mean([r.get("grpo_loss", 0.0) for r in rows])),
            mean_ssopd_loss=float(np.mean([r.get("ssopd_loss", 0.0) for r in rows])),
            mean_lambda=float(np.mean([r.get("lambda_x", 0.0) for r in rows])),
            frac_mixed_groups=float(np.mean([0 < m < 1 for m in rewards])),
            avg_at_k=score,
            grad_norm=float(np.linalg.norm(grad)),
        ))
        log.debug("step %d reward %.3f", step, metrics[-1].mean_reward)
    return TrainResult(params, metrics, diagnostics, checkpoints, checkpoint_scores)


def _prompt_step(method, task, group, grpo_cfg, ssopd_cfg, teacher, student, reference) -> dict:
    ref = reference if grpo_cfg.beta > 0 else None
    p_hat = float(group.rewards.mean())
    if method == "grpo":
        loss, grad = grpo_loss(group, student, ref, grpo_cfg)
        return {"loss": loss, "grad": grad, "p_hat": p_hat, "grpo_loss": loss}
    if method == "ssopd":
        loss, grad, diag = combined_prompt_step(task, group, grpo_cfg, ssopd_cfg, teacher,
                                                student, ref)
        return {"loss": loss, "grad": grad, **_diag_row(diag)}
    if method == "sft_ref":
        loss, grad = sft_loss(task, student)
        return {"loss": loss, "grad": grad, "sft_loss": loss}
    loss, grad, rate = opsd_ref_loss(task, group.completions, teacher, student, ssopd_cfg)
    return {"loss": loss, "grad": grad, "p_hat": p_hat, "opsd_loss": loss, "clip_rate": rate}


def _diag_row(diag: StepDiagnostics) -> dict:
    return {
        "p_hat": diag.p_hat,
        "lambda_x": diag.lambda_x,
        "len_plus": diag.len_plus,
        "len_minus": diag.len_minus,
        "k_minus": diag.k_minus,
        "grpo_loss": diag.grpo_loss,
        "ssopd_loss": diag.ssopd_loss,
        "clip_rate": diag.clip_rate,
    }

