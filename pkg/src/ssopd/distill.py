"""Self-supervised on-policy distillation on top of a GRPO group.

A correct rollout from the group (the witness) is shown to a stop-gradient
teacher inside a hint block; the teacher's next-token distribution is then
distilled into the student at the early prefixes of a failed rollout from the
same group, through a forward KL whose per-action summands are clipped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .env import Completion, TaskInstance
from .grpo import GrpoConfig, RolloutGroup, grpo_loss
from .policy import (
    ActionDistribution,
    Context,
    PolicyParams,
    dist_from_features,
    featurize,
)

CORRECT_RULES = ("Len_max", "Len_min", "AvgLogP_max", "AvgLogP_min")
WRONG_RULES = ("Len_max", "Len_min", "AvgLogP_max")


@dataclass(frozen=True)
class SelectorRule:
    correct_rule: str = "Len_min"
    wrong_rule: str = "Len_max"

    def __post_init__(self):
        if self.correct_rule not in CORRECT_RULES:
            raise ValueError(f"unknown correct-side rule {self.correct_rule!r}")
        if self.wrong_rule not in WRONG_RULES:
            raise ValueError(f"unknown wrong-side rule {self.wrong_rule!r}")

    @property
    def is_default(self) -> bool:
        return (self.correct_rule, self.wrong_rule) == ("Len_min", "Len_max")


@dataclass(frozen=True)
class WitnessPair:
    y_plus: Completion
    y_minus: Completion
    k_minus: int
    plus_index: int = -1
    minus_index: int = -1

    def __post_init__(self):
        if self.y_plus.reward != 1 or self.y_minus.reward != 0:
            raise ValueError("witness must be correct and the failed rollout wrong")
        if not 1 <= self.k_minus <= self.y_minus.stop_time:
            raise ValueError("k_minus must lie in [1, stop_time(y_minus)]")


@dataclass(frozen=True)
class SsopdConfig:
    lambda0: float = 0.5
    prefix_budget: int = 8
    tau_clip: float = 0.05
    dynamic_weight: bool = True
    selector: SelectorRule = field(default_factory=SelectorRule)

    def __post_init__(self):
        if self.lambda0 < 0:
            raise ValueError("lambda0 must be >= 0")
        if self.prefix_budget < 1:
            raise ValueError("prefix_budget must be >= 1")
        if self.tau_clip <= 0:
            raise ValueError("tau_clip must be > 0")


def split_group(group: RolloutGroup):
    """Indices and completions of the correct and wrong members, in group order."""
    correct = [(i, c) for i, c in enumerate(group.completions) if c.reward == 1]
    wrong = [(i, c) for i, c in enumerate(group.completions) if c.reward == 0]
    return correct, wrong


def _select(members, rule: str):
    if rule.startswith("Len"):
        key = lambda ic: ic[1].stop_time  # noqa: E731
    else:
        key = lambda ic: ic[1].avg_logprob  # noqa: E731
    pick = min if rule.endswith("_min") else max
    # min/max return the first extremum, i.e. the lowest group index on ties
    return pick(members, key=key)


def select_witness(correct, wrong, rule: SelectorRule = SelectorRule(),
                   prefix_budget: int = 8) -> WitnessPair | None:
    """Apply the selector rule to ``(index, completion)`` lists; None unless both are nonempty."""
    if not correct or not wrong:
        return None
    i_plus, y_plus = _select(correct, rule.correct_rule)
    i_minus, y_minus = _select(wrong, rule.wrong_rule)
    return WitnessPair(y_plus, y_minus, min(prefix_budget, y_minus.stop_time), i_plus, i_minus)


def build_hint(prompt, prefix, witness: Completion | tuple, env) -> Context:
    tokens = witness.tokens if isinstance(witness, Completion) else tuple(witness)
    if env.hint_open in tokens or env.hint_close in tokens:
        raise ValueError("witness tokens contain hint delimiters")
    return Context(tuple(prompt) + (env.hint_open,) + tokens + (env.hint_close,) + tuple(prefix),
                   True)


def teacher_distribution(teacher: PolicyParams, hint_context: Context) -> ActionDistribution:
    return dist_from_features(teacher, featurize(hint_context, teacher.env, teacher.feature_order))


def opsd_pointwise_loss(q_T: ActionDistribution, p: ActionDistribution,
                        tau_clip: float = 0.05) -> tuple[float, np.ndarray, np.ndarray]:
    """Forward KL with each per-action summand capped at ``tau_clip``.

    Returns ``(loss, grad_logp, clipped_mask)``: the gradient is w.r.t. the
    student's log-probabilities, and a capped summand contributes nothing to it.
    Actions with zero teacher mass contribute zero.
    """
    q = np.asarray(q_T.probs)
    support = q > 0
    summand = np.zeros_like(q)
    summand[support] = q[support] * (q_T.logprobs[support] - p.logprobs[support])
    clipped = support & (summand >= tau_clip)
    loss = float(np.minimum(summand, tau_clip).sum())
    grad_logp = np.where(support & ~clipped, -q, 0.0)
    return loss, grad_logp, clipped


def ssopd_prompt_loss(task: TaskInstance, pair: WitnessPair, teacher: PolicyParams,
                      student: PolicyParams, cfg: SsopdConfig, return_clip_rates: bool = False):
    """Average clipped distillation loss over the first ``k_minus`` prefixes of ``y_minus``."""
    env = task.env
    grad = np.zeros_like(student.weights)
    total = 0.0
    clip_rates = []
    for t in range(pair.k_minus):
        prefix = pair.y_minus.tokens[:t]
        q = teacher_distribution(teacher, build_hint(task.prompt, prefix, pair.y_plus, env))
        idx = featurize(Context(task.prompt + prefix), env, student.feature_order)
        p = dist_from_features(student, idx)
        loss, g_logp, clipped = opsd_pointwise_loss(q, p, cfg.tau_clip)
        total += loss
        # d log p_a / d z_b = delta_ab - p_b
        grad[idx] += (g_logp - p.probs * g_logp.sum()) / pair.k_minus
        clip_rates.append(float(clipped.sum()) / max(int((q.probs > 0).sum()), 1))
    out = (total / pair.k_minus, grad)
    return out + (clip_rates,) if return_clip_rates else out


def frontier_weight(rewards, lambda0: float = 0.5, dynamic: bool = True) -> float:
    """``lambda0 * 4 p (1 - p)`` on the group success rate, or ``lambda0`` on mixed groups."""
    r = np.asarray(rewards, dtype=np.float64)
    p_hat = float(r.mean())
    if dynamic:
        return lambda0 * 4.0 * p_hat * (1.0 - p_hat)
    return lambda0 if 0 < p_hat < 1 else 0.0


@dataclass
class StepDiagnostics:
    p_hat: float
    lambda_x: float
    grpo_loss: float
    ssopd_loss: float = 0.0
    len_plus: int | None = None
    len_minus: int | None = None
    k_minus: int | None = None
    clip_rates: list[float] = field(default_factory=list)

    @property
    def clip_rate(self) -> float:
        return float(np.mean(self.clip_rates)) if self.clip_rates else 0.0


def combined_prompt_step(task: TaskInstance, group: RolloutGroup, grpo_cfg: GrpoConfig,
                         ssopd_cfg: SsopdConfig, teacher: PolicyParams, student: PolicyParams,
                         reference: PolicyParams | None = None, lambda_x: float | None = None):
    """Per-prompt GRPO loss plus the frontier-weighted distillation term.

    ``lambda_x`` may be supplied to reuse a cached value; it is a constant either way.
    Without a witness pair, or with a zero weight, the GRPO output is returned as is.
    """
    g_loss, g_grad = grpo_loss(group, student, reference, grpo_cfg)
    correct, wrong = split_group(group)
    p_hat = len(correct) / len(group)
    pair = select_witness(correct, wrong, ssopd_cfg.selector, ssopd_cfg.prefix_budget)
    if pair is None:
        lam = 0.0
    elif lambda_x is None:
        lam = frontier_weight(group.rewards, ssopd_cfg.lambda0, ssopd_cfg.dynamic_weight)
    else:
        lam = float(lambda_x)
    diag = StepDiagnostics(p_hat=p_hat, lambda_x=lam, grpo_loss=g_loss)
    if pair is not None:
        diag.len_plus, diag.len_minus = pair.y_plus.stop_time, pair.y_minus.stop_time
        diag.k_minus = pair.k_minus
    if pair is None or lam == 0.0:
        return g_loss, g_grad, diag

    s_loss, s_grad, rates = ssopd_prompt_loss(task, pair, teacher, student, ssopd_cfg,
                                              return_clip_rates=True)
    diag.ssopd_loss, diag.clip_rates = s_loss, rates
    return g_loss + lam * s_loss, g_grad + lam * s_grad, diag
