"""Experiment configuration: defaults, schema validation, dotted-path overrides and hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

VARIANTS = ("baseline", "lom", "ma", "lomma")
DEFAULT_LAMBDA_PRIOR = {"kedmi": 100.0, "gmi": 1.0}
ATTACKS = ("kedmi", "gmi")

_TRAIN = {"epochs": 8, "batch_size": 64, "lr": 1e-3, "optimizer": "adam", "weight_decay": 0.0,
          "holdout_fraction": 0.2}

DEFAULTS: dict = {
    "seed": 0,
    "out": "runs/experiment",
    # kedmi: Gaussian latent + probabilistic discriminator; gmi: point latent + critic
    "attack": "kedmi",
    "variant": "lomma",
    "data": {
        "source": "idx",  # idx | mnist-subset | synth
        "images": "",
        "labels": "",
        "cache_dir": "~/.cache/milab",
        "private_classes": [0, 1, 2, 3, 4],
        "public_classes": [5, 6, 7, 8, 9],
        "max_per_class": None,
        "synth": {"n_classes": 6, "n_per_class": 60, "image_size": 16},
    },
    "target": {"arch": "Conv3", **_TRAIN},
    "eval": {"arch": "Conv5", **_TRAIN},
    "augment": {"archs": ["Conv2", "Conv4"], "temperature": 1.0, "epochs": 8, "batch_size": 64, "lr": 1e-3,
                "optimizer": "adam", "holdout_fraction": 0.2, "shift": 0,
                "schedule": "constant"},
    "gan": {"n_z": 64, "iterations": 1500, "batch_size": 64, "lr": 2e-4, "beta1": 0.5, "beta2": 0.9,
            "n_critic": 5, "gp_weight": 10.0, "width": 16},
    "inversion": {
        "iterations": 2400,
        "optimizer": "sgd",
        "lr": 0.02,
        "momentum": 0.0,
        # null: 100 for the probabilistic prior (kedmi), 1 for the critic prior (gmi)
        "lambda_prior": None,
        "loss_scale": 1.0,
        "clip_z": True,
        "restarts": 5,
        "classes": None,
        "lambda_reg": 1.0,
        "preg_samples": None,
        "preg_mode": "sampled",
    },
    # overfit_draws: images drawn per Gaussian inversion run for the overfit analysis
    "evaluation": {"tau_low": None, "tau_high": None, "overfit_draws": 20, "dump_images": True},
}

# fields whose default does not pin down the type, or that take one of a few values
_NULLABLE = {
    "data.max_per_class": (int,),
    "inversion.classes": (list,),
    "inversion.preg_samples": (int,),
    "inversion.lambda_prior": (int, float),
    "evaluation.tau_low": (int, float),
    "evaluation.tau_high": (int, float),
}
_CHOICES = {
    "attack": ATTACKS,
    "variant": VARIANTS,
    "data.source": ("idx", "mnist-subset", "synth"),
    "target.optimizer": ("sgd", "adam"),
    "eval.optimizer": ("sgd", "adam"),
    "augment.optimizer": ("sgd", "adam"),
    "inversion.optimizer": ("sgd", "adam"),
    "inversion.preg_mode": ("fixed", "sampled"),
    "augment.schedule": ("constant", "cosine"),
}
_POSITIVE = {"target.epochs", "eval.epochs", "augment.epochs", "augment.temperature", "gan.n_z",
             "gan.batch_size", "gan.width", "inversion.restarts", "target.batch_size", "eval.batch_size",
             "augment.batch_size", "evaluation.overfit_draws"}
_NON_NEGATIVE = {"gan.iterations", "inversion.iterations", "inversion.lambda_prior", "inversion.lambda_reg",
                 "inversion.lr", "inversion.momentum", "gan.gp_weight", "augment.shift"}


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"config field '{field}': {message}")
        self.field = field


def _type_ok(value, expected) -> bool:
    if isinstance(value, bool) != (expected is bool):
        return False
    if expected is float:
        return isinstance(value, (int, float))
    return isinstance(value, expected)


def validate(config: dict, defaults: dict = DEFAULTS, prefix: str = "") -> dict:
    """Check keys and types against the defaults tree; return the config unchanged."""
    if not isinstance(config, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", "expected a mapping")
    for key in config:
        if key not in defaults:
            raise ConfigError(prefix + key, "unknown field")
    for key, default in defaults.items():
        path = prefix + key
        if key not in config:
            raise ConfigError(path, "missing field")
        value = config[key]
        if isinstance(default, dict):
            validate(value, default, path + ".")
            continue
        if value is None:
            if path not in _NULLABLE:
                raise ConfigError(path, "may not be null")
            continue
        allowed = _NULLABLE.get(path, (type(default),))
        if not any(_type_ok(value, t) for t in allowed):
            names = "/".join(t.__name__ for t in allowed)
            raise ConfigError(path, f"expected {names}, got {type(value).__name__} {value!r}")
        if path in _CHOICES and value not in _CHOICES[path]:
            raise ConfigError(path, f"must be one of {list(_CHOICES[path])}, got {value!r}")
        if path in _POSITIVE and value <= 0:
            raise ConfigError(path, f"must be positive, got {value!r}")
        if path in _NON_NEGATIVE and value < 0:
            raise ConfigError(path, f"must be non-negative, got {value!r}")
    if not prefix:
        priv = set(config["data"]["private_classes"])
        pub = set(config["data"]["public_classes"])
        if priv & pub:
            raise ConfigError("data.public_classes", f"overlaps private classes at {sorted(priv & pub)}")
    return config


def merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def set_path(config: dict, dotted: str, value) -> dict:
    """Return a copy with ``dotted`` (e.g. "inversion.lr") replaced by ``value``."""
    out = copy.deepcopy(config)
    node = out
    parts = dotted.split(".")
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(dotted, "no such section")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(dotted, "unknown field")
    node[parts[-1]] = value
    return out


def parse_override(text: str) -> tuple[str, object]:
    """'a.b=value' with the value parsed as YAML (so 3, 0.5, true, [1, 2] and null work)."""
    if "=" not in text:
        raise ConfigError(text, "override must look like section.field=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def load(path=None, overrides=()) -> dict:
    """Defaults, then the YAML/JSON file at ``path``, then dotted overrides; validated."""
    config = copy.deepcopy(DEFAULTS)
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError("<root>", f"{path} does not hold a mapping")
        config = merge(config, loaded)
    for item in overrides:
        key, value = item if isinstance(item, tuple) else parse_override(item)
        config = set_path(config, key, value)
    return validate(config)


def canonical_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
