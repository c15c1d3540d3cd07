"""Run configuration: every hyperparameter, the file format, and overrides.

The config file is a flat key=value format with INI sections; keys match the
TrainConfig field names exactly. Command-line overrides use ``--set
key=value`` with the bare field name.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # world
    n_attrs: int = 4
    n_values: int = 6
    world_seed: int = 0
    bias_zipf: float = 0.0          # 0 = uniform world; >0 = zipf exponent
    synonyms: int = 1
    # model
    emb_size: int = 32
    hidden_size: int = 64
    max_len: int = 6
    # game
    n_distractors: int = 4
    distractor_mode: str = "uniform"
    hard_threshold: float = 0.75
    # data
    dataset_size: int = 300
    val_size: int = 200
    test_size: int = 200
    # loss
    speaker_entropy_coef: float = 0.01
    listener_entropy_coef: float = 0.03
    listener_target_coef: float = 0.8
    interactive_weight: float = 0.1     # KL-grounding ablation only
    literal_entropy_sign: bool = False
    literal_target_sign: bool = False
    listener_supervised_literal: bool = True
    reinforce_baseline: bool = False
    # optim
    outer_lr: float = 1e-3
    inner_lr: float = 0.1
    # schedule
    pretrain_steps: int = 300
    meta_steps: int = 20
    interactive_steps: int = 30
    supervised_steps: int = 10
    finetune_steps: int = 60
    max_outer_iters: int = 15
    patience: int = 5
    min_delta: float = 0.005
    batch_size: int = 128
    meta_batch_size: int = 32
    meta_variant: str = "maml"          # maml | fomaml | reptile
    reptile_inner_steps: int = 1
    buffer_capacity: int = 32
    # baselines
    population_size: int = 3
    static_pair_iters: int = 6
    gentrans_period: int = 5
    # eval
    eval_episodes: int = 5000
    val_episodes: int = 500
    # run
    seed: int = 1
    deterministic: bool = True
    debug_checks: bool = False
    trace: bool = False

    def __post_init__(self):
        for name in ("speaker_entropy_coef", "listener_entropy_coef",
                     "listener_target_coef", "interactive_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("meta_steps", "interactive_steps", "supervised_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("batch_size", "max_outer_iters"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.meta_variant not in ("maml", "fomaml", "reptile"):
            raise ConfigError(f"unknown meta_variant '{self.meta_variant}'")
        if self.distractor_mode not in ("uniform", "hard"):
            raise ConfigError(f"unknown distractor_mode '{self.distractor_mode}'")
        if self.inner_lr < 0:
            raise ConfigError("inner_lr must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


SECTIONS = {
    "world": ["n_attrs", "n_values", "world_seed", "bias_zipf", "synonyms"],
    "model": ["emb_size", "hidden_size", "max_len"],
    "game": ["n_distractors", "distractor_mode", "hard_threshold"],
    "data": ["dataset_size", "val_size", "test_size"],
    "loss": ["speaker_entropy_coef", "listener_entropy_coef", "listener_target_coef",
             "interactive_weight", "literal_entropy_sign", "literal_target_sign",
             "listener_supervised_literal", "reinforce_baseline"],
    "optim": ["outer_lr", "inner_lr"],
    "schedule": ["pretrain_steps", "meta_steps", "interactive_steps",
                 "supervised_steps", "finetune_steps", "max_outer_iters", "patience",
                 "min_delta", "batch_size", "meta_batch_size", "meta_variant",
                 "reptile_inner_steps", "buffer_capacity"],
    "baselines": ["population_size", "static_pair_iters", "gentrans_period"],
    "eval": ["eval_episodes", "val_episodes"],
    "run": ["seed", "deterministic", "debug_checks", "trace"],
}

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def valid_keys() -> list[str]:
    return list(_FIELD_TYPES)


def _coerce(key: str, raw: str):
    ftype = _FIELD_TYPES[key]
    raw = raw.strip()
    if ftype == "bool":
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean for '{key}': {raw!r}")
    if ftype == "int":
        return int(raw)
    if ftype == "float":
        return float(raw)
    return raw


def paper_config() -> TrainConfig:
    """The published hyperparameter setting (full-scale reference, not desk)."""
    return TrainConfig(
        batch_size=1024,
        buffer_capacity=200,
        meta_steps=60,
        supervised_steps=25,
        interactive_steps=80,
        speaker_entropy_coef=0.01,
        listener_entropy_coef=0.03,
        listener_target_coef=0.8,
        interactive_weight=0.1,
        outer_lr=1e-4,
        inner_lr=1e-4,
        n_distractors=9,
        dataset_size=300,
        max_outer_iters=40,
    )


def desk_config() -> TrainConfig:
    """Laptop-scale defaults (the dataclass defaults)."""
    return TrainConfig()


def load_config(path) -> TrainConfig:
    parser = configparser.ConfigParser()
    with open(path) as f:
        parser.read_file(f)
    values = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if key not in _FIELD_TYPES:
                raise ConfigError(
                    f"unknown config key '{key}' (valid keys: {', '.join(valid_keys())})"
                )
            values[key] = _coerce(key, raw)
    return TrainConfig(**values)


def save_config(cfg: TrainConfig, path) -> None:
    parser = configparser.ConfigParser()
    d = cfg.to_dict()
    for section, keys in SECTIONS.items():
        parser[section] = {k: str(d[k]) for k in keys}
    with open(path, "w") as f:
        parser.write(f)


def apply_overrides(cfg: TrainConfig, overrides) -> TrainConfig:
    updates = {}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(
                f"unknown config key '{key}' (valid keys: {', '.join(valid_keys())})"
            )
        updates[key] = _coerce(key, raw)
    return cfg.replace(**updates) if updates else cfg


def config_hash(cfg: TrainConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]
