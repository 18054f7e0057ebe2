"""Line-oriented ``key = value`` configuration files.

Keys mirror :class:`~tensornet.model.ModelConfig` and
:class:`~tensornet.training.TrainConfig`; loss weights are spelled
``weight_<term>``.  Blank lines and ``#`` comments are ignored and unknown
keys are errors.  The same text form (with ``model.``, ``train.`` and
``metrics.`` prefixes) is the canonical config block of a checkpoint.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Callable, Mapping

from tensornet.model import HEADS, ModelConfig
from tensornet.training import LOSS_TERMS, TrainConfig

__all__ = ["ConfigError", "MODEL_KEYS", "TRAIN_KEYS", "parse_config", "parse_config_text",
           "config_lines", "canonical_text", "parse_canonical_text", "format_value"]


class ConfigError(ValueError):
    """Unknown key or unparsable value in a configuration file."""


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_int(text: str):
    return None if text.strip().lower() == "none" else int(text)


def _heads(text: str) -> tuple:
    aliases = {"e": "energy_forces", "f": "energy_forces", "energy": "energy_forces",
               "forces": "energy_forces", "mu": "dipole", "alpha": "polarizability",
               "sigma": "shielding"}
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        head = aliases.get(item, item)
        if head not in HEADS:
            raise ValueError(f"unknown head {item!r}")
        if head not in out:
            out.append(head)
    return tuple(out)


def _element_map(text: str):
    if text.strip().lower() == "none":
        return None
    out = {}
    for item in text.split(","):
        if item.strip():
            z, v = item.split(":")
            out[int(z)] = float(v)
    return out


MODEL_KEYS: dict[str, Callable[[str], object]] = {
    "n_channels": int,
    "n_rbf": int,
    "cutoff": float,
    "n_layers": int,
    "group": str.strip,
    "max_atomic_number": int,
    "heads": _heads,
    "energy_scale": float,
    "energy_shift": float,
    "element_shifts": _element_map,
    "element_weights": _element_map,
    "dtype": str.strip,
}

TRAIN_KEYS: dict[str, Callable[[str], object]] = {
    "batch_size": int,
    "lr_init": float,
    "warmup_steps": int,
    "plateau_patience": int,
    "plateau_factor": float,
    "lr_min": float,
    "ema_weight": float,
    "grad_clip_norm": float,
    "max_epochs": int,
    "max_steps": _optional_int,
    "early_stop_patience": int,
    "seed": int,
    "val_fraction": float,
    "standardize": _bool,
    **{f"weight_{t}": float for t in LOSS_TERMS},
}


def _split_lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        yield lineno, key.strip(), value.strip()


def _build(model_vals: dict, train_vals: dict) -> tuple[ModelConfig, TrainConfig]:
    weights = {t: train_vals.pop(f"weight_{t}") for t in LOSS_TERMS if f"weight_{t}" in train_vals}
    if weights:
        train_vals["loss_weights"] = {t: w for t, w in weights.items()}
    if model_vals.get("element_weights", 0) is None:
        model_vals.pop("element_weights")
    return ModelConfig(**model_vals), TrainConfig(**train_vals)


def parse_config_text(text: str) -> tuple[ModelConfig, TrainConfig]:
    """Model and training configs from ``key = value`` text."""
    model_vals: dict = {}
    train_vals: dict = {}
    for lineno, key, value in _split_lines(text):
        table, target = (MODEL_KEYS, model_vals) if key in MODEL_KEYS else (TRAIN_KEYS, train_vals)
        if key not in table:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in target:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            target[key] = table[key](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    try:
        return _build(model_vals, train_vals)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_config(path) -> tuple[ModelConfig, TrainConfig]:
    return parse_config_text(Path(path).read_text())


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if isinstance(v, dict):
        return ",".join(f"{int(k)}:{float(x)!r}" for k, x in sorted(v.items()))
    return str(v)


def config_lines(model_cfg: ModelConfig | None = None, train_cfg: TrainConfig | None = None,
                 prefix: bool = False) -> list[str]:
    """``key = value`` lines in a fixed key order."""
    lines = []
    if model_cfg is not None:
        for key in MODEL_KEYS:
            name = f"model.{key}" if prefix else key
            lines.append(f"{name} = {format_value(getattr(model_cfg, key))}")
    if train_cfg is not None:
        for key in TRAIN_KEYS:
            if key.startswith("weight_"):
                value = train_cfg.loss_weights.get(key[len("weight_"):], 0.0)
            else:
                value = getattr(train_cfg, key)
            name = f"train.{key}" if prefix else key
            lines.append(f"{name} = {format_value(value)}")
    return lines


def canonical_text(model_cfg: ModelConfig | None, train_cfg: TrainConfig | None,
                   metrics: Mapping[str, float] | None = None) -> str:
    lines = config_lines(model_cfg, train_cfg, prefix=True)
    for key in sorted(metrics or {}):
        lines.append(f"metrics.{key} = {format_value(float(metrics[key]))}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_canonical_text(text: str):
    """Inverse of :func:`canonical_text`: (model_cfg, train_cfg, metrics)."""
    model_vals: dict = {}
    train_vals: dict = {}
    metrics: dict = {}
    for lineno, key, value in _split_lines(text):
        section, _, name = key.partition(".")
        try:
            if section == "model" and name in MODEL_KEYS:
                model_vals[name] = MODEL_KEYS[name](value)
            elif section == "train" and name in TRAIN_KEYS:
                train_vals[name] = TRAIN_KEYS[name](value)
            elif section == "metrics":
                metrics[name] = float(value)
            else:
                raise ConfigError(f"config block line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            raise ConfigError(f"config block line {lineno}: bad value for {key!r}: {exc}") from None
    model_cfg = ModelConfig(**model_vals) if model_vals else None
    train_cfg = None
    if train_vals:
        weights = {t: train_vals.pop(f"weight_{t}") for t in LOSS_TERMS if f"weight_{t}" in train_vals}
        train_cfg = TrainConfig(**train_vals, loss_weights={t: w for t, w in weights.items() if w != 0.0})
    return model_cfg, train_cfg, metrics
