"""Run configuration: YAML file plus ``--set key=value`` overrides.

Keys are dotted (``model.input_size``, ``train.lr``); nested YAML mappings
are flattened to the same form. Unknown keys are errors.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import yaml

from .arch import VARIANTS, FilterSchedule, ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


PRESETS = {
    "default": {},
    "tiny": {"stem_width": 8, "stage_widths": (8, 12, 16, 24)},
}

_MODEL_FIELDS = {f.name for f in fields(ModelConfig)} - {"schedule", "ablation"}
_SCHEDULE_FIELDS = {f.name for f in fields(FilterSchedule)} - {"values"}
_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}
_TRAIN_ALIASES = {"lr": "learning_rate", "batch": "batch_size", "dropout": "dropout_rate"}
_DATA_FIELDS = {"corpus"}

KNOWN_KEYS = (
    {f"model.{k}" for k in _MODEL_FIELDS}
    | {f"model.schedule.{k}" for k in _SCHEDULE_FIELDS}
    | {"model.preset", "model.variant", "model.seed"}
    | {f"train.{k}" for k in _TRAIN_FIELDS | set(_TRAIN_ALIASES)}
    | {f"data.{k}" for k in _DATA_FIELDS}
)


def flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}.{k}" if prefix else str(k)
        if isinstance(v, dict):
            out.update(flatten(v, key))
        else:
            out[key] = v
    return out


def parse_override(item: str) -> tuple:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value of {key}: {exc}") from None
    return key.strip(), value


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    model_seed: int
    data: dict
    resolved: dict  # flat key -> value, after defaults and overrides

    def dump(self) -> str:
        return yaml.safe_dump(self.resolved, sort_keys=True, default_flow_style=None)

    def write_resolved(self, out_dir) -> Path:
        path = Path(out_dir) / "config.resolved"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dump())
        return path


def _tuple(v):
    return tuple(v) if isinstance(v, (list, tuple)) else v


def build_run_config(flat: dict) -> RunConfig:
    unknown = sorted(set(flat) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    preset = flat.get("model.preset", "default")
    if preset not in PRESETS:
        raise ConfigError(f"unknown model preset {preset!r}; expected one of {sorted(PRESETS)}")
    variant = flat.get("model.variant", "baseline")
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
    model_kw = dict(PRESETS[preset])
    sched_kw = {}
    train_kw = {}
    for key, value in flat.items():
        section, _, name = key.partition(".")
        if section == "model" and name.startswith("schedule."):
            sched_kw[name.split(".", 1)[1]] = value
        elif section == "model" and name in _MODEL_FIELDS:
            model_kw[name] = _tuple(value)
        elif section == "train":
            train_kw[_TRAIN_ALIASES.get(name, name)] = _tuple(value)
    try:
        if sched_kw:
            model_kw["schedule"] = FilterSchedule(**sched_kw)
        model = ModelConfig(**model_kw).with_ablation(variant)
        train = TrainConfig(**train_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    resolved = {f"model.{k}": v for k, v in model.to_dict().items() if k not in ("schedule", "ablation")}
    resolved.update({f"model.schedule.{k}": v for k, v in model.to_dict()["schedule"].items()})
    resolved.update({"model.preset": preset, "model.variant": variant,
                     "model.seed": int(flat.get("model.seed", 0))})
    resolved.update({f"train.{k}": v for k, v in train.to_dict().items()})
    data = {k.split(".", 1)[1]: v for k, v in flat.items() if k.startswith("data.")}
    resolved.update({f"data.{k}": v for k, v in data.items()})
    resolved = {k: list(v) if isinstance(v, tuple) else v for k, v in resolved.items()}
    return RunConfig(model, train, resolved["model.seed"], data, resolved)


def load_run_config(path: Optional[str] = None, overrides: Sequence[str] = (), base: Optional[dict] = None) -> RunConfig:
    """``base`` defaults, then the YAML file at ``path``, then ``overrides``."""
    flat = dict(base or {})
    if path is not None:
        try:
            tree = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from None
        if not isinstance(tree, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        flat.update(flatten(tree))
    for item in overrides:
        key, value = parse_override(item)
        flat[key] = value
    return build_run_config(flat)
