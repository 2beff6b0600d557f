"""Selective self-distillation on top of group-relative policy optimization, on toy token tasks.

The modules layer as follows: ``env`` (tasks and verifiers), ``policy`` (log-linear
token policy), ``grpo`` and ``distill`` (losses with analytic gradients), ``oracle``
(exact enumeration checks), ``trainer`` (optimization loop) and ``cli`` (harness).
"""

from .distill import SelectorRule, SsopdConfig, combined_prompt_step
from .env import EnvSpec, TaskInstance, make_task, verify
from .grpo import GrpoConfig, RolloutGroup, grpo_loss
from .policy import PolicyParams, init_params, sample_completion
from .trainer import TrainConfig, avg_at_k, train

__version__ = "0.1.0"

__all__ = [
    "EnvSpec", "TaskInstance", "make_task", "verify",
    "PolicyParams", "init_params", "sample_completion",
    "GrpoConfig", "RolloutGroup", "grpo_loss",
    "SelectorRule", "SsopdConfig", "combined_prompt_step",
    "TrainConfig", "avg_at_k", "train",
]
