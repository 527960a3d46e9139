"""Flat JSON run configuration with strict key checking.

Key names follow the usual hyperparameter vocabulary (``kl_loss_coeff``,
``ppo_epochs``, ...). Every key belongs to exactly one section; unknown keys
are rejected so a misspelled hyperparameter never passes silently.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .evalscheme import EVAL_CONFIGS
from .policy import WARM_START_COPY_FRACTION, WARM_START_STEPS, GenerationConfig
from .rewards import DEFAULT_LAMBDA_LANG
from .rlcore import TrainConfig


@dataclass(frozen=True)
class PolicyConfig:
    embed_dim: int = 32
    hidden_dim: int = 128
    warm_start: bool = True
    warm_start_steps: int = WARM_START_STEPS
    warm_start_copy_fraction: float = WARM_START_COPY_FRACTION

    def __post_init__(self):
        if self.embed_dim <= 0 or self.hidden_dim <= 0:
            raise ConfigError("embed_dim and hidden_dim must be positive")
        if self.warm_start_steps < 0:
            raise ConfigError("warm_start_steps must be >= 0")
        if not 0.0 <= self.warm_start_copy_fraction <= 1.0:
            raise ConfigError("warm_start_copy_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class EvalPlan:
    eval_splits: tuple[str, ...] = ("val", "test")
    eval_configs: tuple[str, ...] = tuple(EVAL_CONFIGS)
    eval_every: int = 1

    def __post_init__(self):
        object.__setattr__(self, "eval_splits", tuple(self.eval_splits))
        object.__setattr__(self, "eval_configs", tuple(self.eval_configs))
        for s in self.eval_splits:
            if s not in ("val", "test"):
                raise ConfigError(f"eval_splits entries must be 'val' or 'test', got {s!r}")
        for c in self.eval_configs:
            if c not in EVAL_CONFIGS:
                raise ConfigError(f"unknown eval config {c!r}; expected one of {sorted(EVAL_CONFIGS)}")
        if self.eval_every <= 0:
            raise ConfigError("eval_every must be positive")


@dataclass(frozen=True)
class RewardConfig:
    lambda_lang: float = DEFAULT_LAMBDA_LANG

    def __post_init__(self):
        if self.lambda_lang < 0:
            raise ConfigError("lambda_lang must be >= 0")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    eval: EvalPlan = field(default_factory=EvalPlan)
    reward: RewardConfig = field(default_factory=RewardConfig)

    def to_flat(self) -> dict[str, Any]:
        flat: dict[str, Any] = {}
        for section in (self.train, self.generation, self.policy, self.eval, self.reward):
            for f in dataclasses.fields(section):
                value = getattr(section, f.name)
                flat[f.name] = list(value) if isinstance(value, tuple) else value
        return flat

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, seed=seed))


_SECTIONS = {
    "train": TrainConfig,
    "generation": GenerationConfig,
    "policy": PolicyConfig,
    "eval": EvalPlan,
    "reward": RewardConfig,
}
_KEY_SECTION = {f.name: name for name, cls in _SECTIONS.items() for f in dataclasses.fields(cls)}

_FLOAT_KEYS = {"epsilon", "gamma", "kl_loss_coeff", "kl_reward_coeff", "learning_rate", "warmup_fraction",
               "clip_grad_norm", "temperature", "top_p", "warm_start_copy_fraction", "lambda_lang"}
_BOOL_KEYS = {"advantage_normalization", "require_eos_for_reward", "drop_last", "warm_start"}


def _check_type(key: str, value: Any) -> Any:
    if key in _BOOL_KEYS:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true/false, got {value!r}")
        return value
    if key in _FLOAT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if key in ("eval_splits", "eval_configs"):
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"{key} must be a list of strings")
        return tuple(value)
    if key == "ppo_backward_batch_size" and value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{key} must be an integer, got {value!r}")
    return value


def config_from_dict(raw: dict[str, Any]) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(_KEY_SECTION))
    if unknown:
        raise ConfigError(f"unrecognized config keys: {', '.join(unknown)}")
    parts: dict[str, dict[str, Any]] = {name: {} for name in _SECTIONS}
    for key, value in raw.items():
        parts[_KEY_SECTION[key]][key] = _check_type(key, value)
    try:
        return RunConfig(**{name: _SECTIONS[name](**kw) for name, kw in parts.items()})
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(raw)
