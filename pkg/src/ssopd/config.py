"""Experiment configuration: INI files with one section per component."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .distill import SelectorRule, SsopdConfig
from .env import EnvSpec
from .grpo import GrpoConfig
from .trainer import METHODS, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class EnvSection:
    vocab_size: int = 4
    horizon: int = 5
    prompt_symbols: int = 16
    feature_order: int = 2
    # prior weight for copying the aligned witness token; plain contexts are unaffected
    hint_strength: float = 2.0


@dataclass
class SuiteSection:
    family: str = "modular_sum"
    n_train: int = 200
    n_eval: int = 50
    modulus_min: int = 2
    modulus_max: int = 7
    secret_len_min: int = 1
    secret_len_max: int = 3
    band_low: float = 0.2
    band_high: float = 0.8
    train_seed: int = 1
    eval_seed: int = 2


@dataclass
class TrainSection:
    method: str = "ssopd"
    steps: int = 300
    batch_size: int = 16
    learning_rate: float = 1e-2
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    teacher_mode: str = "fixed_initial"
    inner_epochs: int = 1
    temperature: float = 1.2
    eval_every: int = 50
    eval_k: int = 12
    checkpoint_every: int = 50
    seeds: tuple = (0, 1, 2, 3, 4, 5, 6, 7, 8, 9)


@dataclass
class GrpoSection:
    group_size: int = 8
    epsilon_r: float = 1e-6
    clip_eps: float = 0.2
    beta: float = 0.0


@dataclass
class SsopdSection:
    lambda0: float = 0.5
    prefix_budget: int = 8
    tau_clip: float = 0.05
    dynamic_weight: bool = True
    correct_rule: str = "Len_min"
    wrong_rule: str = "Len_max"


@dataclass
class VerifySection:
    seed: int = 0
    n_instances: int = 200
    max_actions: int = 3
    max_horizon: int = 5
    gammas: tuple = (0.5, 0.9, 0.99)
    etas: tuple = (0.1, 0.5, 0.9)
    trained_checkpoints: int = 100


@dataclass
class EvalSection:
    checkpoint: str = ""
    k: int = 12
    seed: int = 0


@dataclass
class AblationSection:
    lambda0_values: tuple = (0.4, 0.5, 0.6, 0.7)


@dataclass
class ExperimentConfig:
    env: EnvSection = field(default_factory=EnvSection)
    suite: SuiteSection = field(default_factory=SuiteSection)
    train: TrainSection = field(default_factory=TrainSection)
    grpo: GrpoSection = field(default_factory=GrpoSection)
    ssopd: SsopdSection = field(default_factory=SsopdSection)
    verify: VerifySection = field(default_factory=VerifySection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # component views -------------------------------------------------------
    def env_spec(self) -> EnvSpec:
        return EnvSpec(self.env.vocab_size, self.env.horizon, self.env.prompt_symbols)

    def train_config(self, seed: int) -> TrainConfig:
        t = self.train
        return TrainConfig(
            steps=t.steps, batch_size=t.batch_size, learning_rate=t.learning_rate,
            optimizer=t.optimizer, adam_betas=(t.adam_beta1, t.adam_beta2), adam_eps=t.adam_eps,
            seed=seed, teacher_mode=t.teacher_mode, inner_epochs=t.inner_epochs,
            temperature=t.temperature, eval_every=t.eval_every, eval_k=t.eval_k,
            checkpoint_every=t.checkpoint_every,
        )

    def grpo_config(self) -> GrpoConfig:
        g = self.grpo
        return GrpoConfig(g.epsilon_r, g.clip_eps, g.beta, g.group_size)

    def ssopd_config(self, **overrides) -> SsopdConfig:
        s = self.ssopd
        kw = dict(lambda0=s.lambda0, prefix_budget=s.prefix_budget, tau_clip=s.tau_clip,
                  dynamic_weight=s.dynamic_weight,
                  selector=SelectorRule(s.correct_rule, s.wrong_rule))
        kw.update(overrides)
        return SsopdConfig(**kw)

    def to_ini(self) -> str:
        lines = []
        for section, values in self.to_dict().items():
            lines.append(f"[{section}]")
            for key, value in values.items():
                if isinstance(value, (tuple, list)):
                    value = ",".join(str(v) for v in value)
                elif isinstance(value, bool):
                    value = "true" if value else "false"
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)


def _coerce(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(raw)
            return configparser.ConfigParser.BOOLEAN_STATES[low]
        if isinstance(default, tuple):
            item = type(default[0]) if default else float
            return tuple(item(x) for x in raw.split(",") if x.strip())
        return type(default)(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from exc


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = ExperimentConfig()
    for section in parser.sections():
        if not hasattr(cfg, section):
            raise ConfigError(f"unknown section [{section}]")
        block = getattr(cfg, section)
        names = {f.name for f in dataclasses.fields(block)}
        for key, raw in parser.items(section):
            if key not in names:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            setattr(block, key, _coerce(raw, getattr(block, key), f"[{section}] {key}"))
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())


def validate(cfg: ExperimentConfig) -> None:
    """Build every component config once so invalid values fail early."""
    try:
        cfg.env_spec()
        cfg.grpo_config()
        cfg.ssopd_config()
        for seed in cfg.train.seeds or (0,):
            cfg.train_config(seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.suite.family not in ("modular_sum", "subsequence_lock"):
        raise ConfigError(f"unknown suite family {cfg.suite.family!r}")
    if cfg.train.method not in METHODS:
        raise ConfigError(f"unknown train method {cfg.train.method!r}; expected one of {METHODS}")
    if not cfg.train.seeds:
        raise ConfigError("[train] seeds must list at least one seed")
