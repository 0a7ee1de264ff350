"""Flat ``key=value`` configuration files and command-line overrides."""

import json
from dataclasses import fields
from pathlib import Path

from .errors import ConfigError, DataError
from .losses import LossWeights
from .train import TrainConfig

_INT = {"branches", "classes", "epochs", "batch_size", "critic_steps", "seed", "eval_every"}
_FLOAT = {"lr0", "momentum", "weight_decay", "critic_lr_scale"} | {f.name for f in fields(LossWeights)}
_STR = {"arch", "dataset", "data_root", "checkpoint_dir", "precision", "kd_pairing"}
_BOOL = {"kl_detach_target"}
_NULLABLE = {"branches", "classes", "data_root"}
KEYS = tuple(sorted(_INT | _FLOAT | _STR | _BOOL))

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def coerce(key, raw):
    """Parse one textual value for ``key``."""
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if key in _NULLABLE and text.lower() in ("", "none", "auto"):
        return None
    try:
        if key in _INT:
            return int(text, 0)
        if key in _FLOAT:
            return float(text)
    except ValueError:
        kind = "an integer" if key in _INT else "a number"
        raise ConfigError(f"{key}: {text!r} is not {kind}") from None
    if key in _BOOL:
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: {text!r} is not a boolean")
    return text


def read_config_file(path):
    """Key/value pairs from a flat text file, or the ``config`` block of a run manifest."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"{path}: cannot read config ({exc.strerror or exc})") from exc
    if path.suffix == ".json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        values = doc.get("config", doc)
        for key in values:
            if key not in KEYS:
                raise ConfigError(f"{path}: unknown config key {key!r}")
        return dict(values)
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        if key not in KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = value.strip()
    return values


def build_config(values, require_seed=True):
    """Turn a key -> value mapping into a validated :class:`TrainConfig`."""
    parsed = {k: coerce(k, v) for k, v in values.items()}
    if require_seed and parsed.get("seed") is None:
        raise ConfigError("seed is required (set seed=<int> in the config or pass --seed)")
    weight_names = {f.name for f in fields(LossWeights)}
    weights = LossWeights(**{k: v for k, v in parsed.items() if k in weight_names})
    rest = {k: v for k, v in parsed.items() if k not in weight_names}
    return TrainConfig(weights=weights, **rest)


def parse_config(path=None, overrides=None, require_seed=True):
    """File values first, then ``overrides`` on top."""
    values = read_config_file(path) if path is not None else {}
    for key, value in (overrides or {}).items():
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = value
    return build_config(values, require_seed=require_seed)
