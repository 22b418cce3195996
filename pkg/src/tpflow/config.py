"""Experiment configuration: nested dataclasses, JSON round-trip, overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .credit import LossConfig
from .exceptions import ConfigurationError


@dataclass(frozen=True)
class ModelSettings:
    hidden_dims: tuple = (64, 64, 64)
    activation: str = "tanh"


@dataclass(frozen=True)
class SamplerSettings:
    n_steps: int = 10
    tau_max: float | None = None  # None -> T / (T + 1)
    alpha: float = 0.7
    window: int = 10
    final_step_sde: bool = False


@dataclass(frozen=True)
class RewardSettings:
    kind: str = "gaussian-bump"
    centers: tuple = ((2.0, 2.0), (-2.0, 2.0), (-2.0, -2.0), (2.0, -2.0))
    bandwidth: float = 1.0


@dataclass(frozen=True)
class LossSettings:
    clip_eps: float = 0.2
    kl_beta: float = 0.0
    variant: str = "tp_unconstrained"
    balance: bool = True
    balance_scope: str = "batch"
    first_step_rule: bool = True

    def to_loss_config(self) -> LossConfig:
        return LossConfig(clip_eps=self.clip_eps, kl_beta=self.kl_beta,
                          variant=self.variant, balance=self.balance,
                          balance_scope=self.balance_scope,
                          first_step_rule=self.first_step_rule)


@dataclass(frozen=True)
class PretrainSettings:
    iterations: int = 2000
    batch_size: int = 256
    learning_rate: float = 1e-3
    data_center: tuple = (0.0, 0.0)
    data_std: float = 1.0
    n_points: int = 4096


@dataclass(frozen=True)
class TrainSettings:
    iterations: int = 300
    samples_per_iteration: int = 96
    group_size: int = 24
    inner_epochs: int = 1
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_every: int = 10
    checkpoint_every: int = 25
    condition_pool: tuple | None = None  # None -> all conditions


@dataclass(frozen=True)
class EvalSettings:
    n_steps: int = 40
    samples_per_condition: int = 256


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSettings = field(default_factory=ModelSettings)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    reward: RewardSettings = field(default_factory=RewardSettings)
    loss: LossSettings = field(default_factory=LossSettings)
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    seed: int = 0

    def validate(self) -> "ExperimentConfig":
        t = self.train
        if t.iterations < 0:
            raise ConfigurationError("train.iterations must be >= 0")
        if t.group_size < 2:
            raise ConfigurationError("train.group_size must be >= 2")
        if t.samples_per_iteration % t.group_size != 0:
            raise ConfigurationError(
                "train.samples_per_iteration must be divisible by train.group_size")
        if t.inner_epochs < 1:
            raise ConfigurationError("train.inner_epochs must be >= 1")
        if self.sampler.window > self.sampler.n_steps:
            raise ConfigurationError("sampler.window must not exceed sampler.n_steps")
        if self.sampler.window < 0:
            raise ConfigurationError("sampler.window must be >= 0")
        n_cond = len(self.reward.centers)
        if t.condition_pool is not None:
            for c in t.condition_pool:
                if not 0 <= int(c) < n_cond:
                    raise ConfigurationError(
                        f"train.condition_pool entry {c} outside [0, {n_cond})")
        self.loss.to_loss_config()  # surfaces loss-field errors
        return self


def _to_plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _to_plain(getattr(value, f.name))
                for f in dataclasses.fields(value)}
    if isinstance(value, tuple):
        return [_to_plain(v) for v in value]
    return value


def config_to_dict(config: ExperimentConfig) -> dict:
    return _to_plain(config)


def _coerce(raw, target_type, key: str):
    import types
    import typing

    origin = typing.get_origin(target_type)
    if origin is typing.Union or origin is types.UnionType:  # Optional[...]
        args = [a for a in typing.get_args(target_type) if a is not type(None)]
        if raw is None:
            return None
        return _coerce(raw, args[0], key)
    if target_type is bool:
        if isinstance(raw, bool):
            return raw
        if isinstance(raw, str) and raw.lower() in ("true", "false"):
            return raw.lower() == "true"
        raise ConfigurationError(f"{key}: expected a boolean, got {raw!r}")
    if target_type is int:
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise ConfigurationError(f"{key}: expected an integer, got {raw!r}")
        if float(raw) != int(raw):
            raise ConfigurationError(f"{key}: expected an integer, got {raw!r}")
        return int(raw)
    if target_type is float:
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise ConfigurationError(f"{key}: expected a number, got {raw!r}")
        return float(raw)
    if target_type is str:
        if not isinstance(raw, str):
            raise ConfigurationError(f"{key}: expected a string, got {raw!r}")
        return raw
    if target_type is tuple or origin is tuple:
        if not isinstance(raw, (list, tuple)):
            raise ConfigurationError(f"{key}: expected a list, got {raw!r}")
        return tuple(tuple(v) if isinstance(v, list) else v for v in raw)
    return raw


def _from_dict(cls, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{prefix or 'config'}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigurationError(
            f"unknown config key: {prefix + key if prefix else key}")
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        raw = data[name]
        key = prefix + name
        if dataclasses.is_dataclass(f.type) or (isinstance(f.type, str)
                                                and f.type in _SECTION_TYPES):
            section_cls = _SECTION_TYPES[f.type] if isinstance(f.type, str) else f.type
            kwargs[name] = _from_dict(section_cls, raw, prefix=key + ".")
        else:
            target = _FIELD_TYPES.get((cls.__name__, name), type(f.default))
            kwargs[name] = _coerce(raw, target, key)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


_SECTION_TYPES = {
    "ModelSettings": ModelSettings,
    "SamplerSettings": SamplerSettings,
    "RewardSettings": RewardSettings,
    "LossSettings": LossSettings,
    "PretrainSettings": PretrainSettings,
    "TrainSettings": TrainSettings,
    "EvalSettings": EvalSettings,
}

# Explicit types where the default value's type is not the whole story.
_FIELD_TYPES = {
    ("SamplerSettings", "tau_max"): float | None,
    ("TrainSettings", "condition_pool"): tuple | None,
}


def config_from_dict(data: dict) -> ExperimentConfig:
    return _from_dict(ExperimentConfig, data).validate()


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


def save_config(config: ExperimentConfig, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def apply_overrides(config: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply dotted key=value overrides, e.g. ``train.learning_rate=0.01``.

    Values parse as JSON where possible (numbers, booleans, lists) and
    fall back to bare strings. Unknown keys are rejected with the
    offending key named.
    """
    data = config_to_dict(config)
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(
                f"override {item!r} must look like section.key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigurationError(f"unknown config key: {key}")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigurationError(f"unknown config key: {key}")
        node[parts[-1]] = value
    return config_from_dict(data)
