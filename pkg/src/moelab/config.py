"""Run configuration: one JSON document, seven sections, strict schema.

Sections: model, moe, losses, schedule, data, train, statlab. Every field is
optional and falls back to the package defaults; unknown sections or keys are
rejected outright so a typo cannot silently run a different experiment. The
resolved configuration hashes to a stable hex digest that run artifacts carry.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields

from .data import DataSpec
from .losses import LossWeights
from .statlab.rates import RateLabSpec
from .training import ModelConfig, TrainConfig

__all__ = ["RunConfig", "ConfigError", "load_config", "parse_config",
           "default_config", "config_hash", "SECTIONS"]

# which dataclass fields each document section feeds
_MODEL_KEYS = ("d_model", "d_hidden", "n_layers", "context_len", "expert_act",
               "attention")
_MOE_KEYS = ("n_experts", "k_active", "kappa", "affinity_mode")
_SCHEDULE_KEYS = ("omega", "a_max", "warmup_frac", "schedule_seed",
                  "freeze_router_on_normal_steps")
_TRAIN_KEYS = ("steps", "batch_size", "lr", "lr_min", "optimizer", "seed",
               "data_seed", "val_frac", "log_every", "eval_every",
               "eval_windows", "checkpoint_every")

SECTIONS = ("model", "moe", "losses", "schedule", "data", "train", "statlab")


class ConfigError(ValueError):
    """Configuration document rejected (shape, keys, or values)."""


def _check_keys(section: str, doc: dict, allowed) -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"section {section!r} must be an object")
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in section {section!r}: {unknown}")


def _coerced(section: str, key: str, value, default):
    """Type-check a raw JSON value against the default's type.

    ints pass where floats are expected; bool is never accepted as a number
    (JSON true/1 confusion is exactly the typo class worth rejecting)."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key} must be a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{section}.{key} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{section}.{key} must be a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{section}.{key} must be an array")
        return tuple(value)
    return value


def _build(cls, section: str, doc: dict, allowed=None, **fixed):
    """Instantiate a config dataclass from one document section."""
    defaults = {f.name: f.default for f in fields(cls)}
    allowed = tuple(allowed) if allowed is not None else tuple(
        k for k in defaults if k not in fixed)
    _check_keys(section, doc, allowed)
    kwargs = dict(fixed)
    for key, value in doc.items():
        kwargs[key] = _coerced(section, key, value, defaults[key])
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"section {section!r}: {exc}") from exc


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: DataSpec
    statlab: RateLabSpec
    resolved: dict  # fully-defaulted document, the thing that gets hashed

    @property
    def sha(self) -> str:
        return config_hash(self.resolved)


def config_hash(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _resolved_doc(model: ModelConfig, train: TrainConfig, data: DataSpec,
                  statlab: RateLabSpec) -> dict:
    def pick(obj, keys):
        return {k: getattr(obj, k) for k in keys}

    weights = train.weights
    return {
        "model": pick(model, _MODEL_KEYS),
        "moe": pick(model, _MOE_KEYS),
        "losses": {f.name: getattr(weights, f.name) for f in fields(LossWeights)},
        "schedule": pick(train, _SCHEDULE_KEYS),
        "data": {f.name: getattr(data, f.name) for f in fields(DataSpec)},
        "train": pick(train, _TRAIN_KEYS),
        "statlab": {f.name: list(v) if isinstance(v := getattr(statlab, f.name),
                                                  tuple) else v
                    for f in fields(RateLabSpec)},
    }


def parse_config(doc: dict) -> RunConfig:
    """Validate a parsed JSON document and build the typed configs."""
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown sections: {unknown}")
    for name in SECTIONS:
        if name in doc and not isinstance(doc[name], dict):
            raise ConfigError(f"section {name!r} must be a JSON object")

    data = _build(DataSpec, "data", doc.get("data", {}))
    weights = _build(LossWeights, "losses", doc.get("losses", {}))
    statlab = _build(RateLabSpec, "statlab", doc.get("statlab", {}))

    model_doc = dict(doc.get("model", {}))
    _check_keys("model", model_doc, _MODEL_KEYS)
    moe_doc = dict(doc.get("moe", {}))
    _check_keys("moe", moe_doc, _MOE_KEYS)
    model = _build(ModelConfig, "model+moe", {**model_doc, **moe_doc},
                   allowed=_MODEL_KEYS + _MOE_KEYS, vocab_size=data.vocab_size)

    train_doc = dict(doc.get("train", {}))
    _check_keys("train", train_doc, _TRAIN_KEYS)
    sched_doc = dict(doc.get("schedule", {}))
    _check_keys("schedule", sched_doc, _SCHEDULE_KEYS)
    train = _build(TrainConfig, "train+schedule", {**train_doc, **sched_doc},
                   allowed=_TRAIN_KEYS + _SCHEDULE_KEYS, weights=weights)

    return RunConfig(model=model, train=train, data=data, statlab=statlab,
                     resolved=_resolved_doc(model, train, data, statlab))


def load_config(path=None) -> RunConfig:
    """Parse a JSON config file; None means all defaults."""
    if path is None:
        return parse_config({})
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    return parse_config(doc)


def default_config() -> RunConfig:
    return parse_config({})
