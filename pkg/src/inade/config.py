"""Run configuration: one structured-text file driving every command.

The file (YAML or JSON) holds up to five sections -- ``data``, ``model``,
``train``, ``loss``, and ``eval`` -- whose keys mirror the corresponding
dataclass fields.  Unknown sections or keys are rejected before any work
starts, and command-line overrides are applied on top of file values.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .data import ShapesConfig
from .engine import TrainConfig
from .errors import ConfigInvalid
from .losses import LossWeights
from .networks import ModelConfig

_SECTIONS = ("data", "model", "train", "loss", "eval")


@dataclass
class EvalOptions:
    """Evaluation knobs consumed by the eval command."""

    metrics: tuple = ("lpips", "instance", "class", "fid")
    groups: int = 10
    pairs: int = 10
    resamples: int = 3
    images: int = 20
    seed: int = 0

    def __post_init__(self):
        known = {"lpips", "instance", "class", "fid"}
        metrics = tuple(self.metrics)
        unknown = set(metrics) - known
        if unknown:
            raise ConfigInvalid(f"unknown metrics {sorted(unknown)}; choose from {sorted(known)}")
        object.__setattr__(self, "metrics", metrics)
        if self.groups < 2 or self.pairs < 1 or self.resamples < 2 or self.images < 1:
            raise ConfigInvalid("eval counts out of range "
                                "(groups>=2, pairs>=1, resamples>=2, images>=1)")


@dataclass
class RunConfig:
    """Fully-resolved configuration for one command invocation."""

    data: ShapesConfig = field(default_factory=ShapesConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)


def _coerce(value, target_type, key):
    if target_type in (tuple, "tuple") or str(target_type).startswith("tuple"):
        if not isinstance(value, (list, tuple)):
            raise ConfigInvalid(f"{key} must be a sequence, got {type(value).__name__}")
        return tuple(value)
    return value


def _build_section(cls, section: dict, name: str):
    allowed = {f.name: f for f in fields(cls)}
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigInvalid(f"unknown keys in [{name}]: {sorted(unknown)}")
    kwargs = {}
    for key, value in section.items():
        f = allowed[key]
        kwargs[key] = _coerce(value, f.type, f"{name}.{key}")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigInvalid(f"bad [{name}] section: {exc}") from exc


def _read_config_text(path: Path) -> dict:
    text = Path(path).read_text()
    try:
        if str(path).endswith(".json"):
            parsed = json.loads(text)
        else:
            parsed = yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigInvalid(f"could not parse config {path}: {exc}") from exc
    if parsed is None:
        return {}
    if not isinstance(parsed, dict):
        raise ConfigInvalid(f"config root must be a mapping, got {type(parsed).__name__}")
    return parsed


def parse_overrides(pairs) -> dict:
    """Turn ``section.key=value`` strings into a nested override dict."""
    tree: dict = {}
    for item in pairs or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigInvalid(
                f"override {item!r} must look like section.key=value")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigInvalid(f"cannot parse override value {raw!r}: {exc}") from exc
        tree.setdefault(section, {})[key] = value
    return tree


def load_run_config(path=None, overrides: dict = None) -> RunConfig:
    """Build a validated RunConfig from an optional file plus overrides."""
    raw = _read_config_text(path) if path else {}
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigInvalid(f"unknown config sections: {sorted(unknown)}")
    merged = {name: dict(raw.get(name) or {}) for name in _SECTIONS}
    for section, values in (overrides or {}).items():
        if section not in _SECTIONS:
            raise ConfigInvalid(f"unknown config section in override: {section}")
        merged[section].update(values)
    for name in _SECTIONS:
        if not isinstance(merged[name], dict):
            raise ConfigInvalid(f"section [{name}] must be a mapping")
    if "model" in merged["train"] or "loss" in merged["train"]:
        raise ConfigInvalid("model and loss settings belong in their own sections")
    data_cfg = _build_section(ShapesConfig, merged["data"], "data")
    model_cfg = _build_section(ModelConfig, merged["model"], "model")
    loss_cfg = _build_section(LossWeights, merged["loss"], "loss")
    train_cfg = _build_section(
        TrainConfig, {"model": model_cfg, "loss": loss_cfg, **merged["train"]}, "train")
    eval_cfg = _build_section(EvalOptions, merged["eval"], "eval")
    return RunConfig(data=data_cfg, train=train_cfg, eval=eval_cfg)


def dump_run_config(cfg: RunConfig) -> str:
    """Serialize the fully-resolved config back to YAML."""
    tree = {
        "data": dataclasses.asdict(cfg.data),
        "model": dataclasses.asdict(cfg.train.model),
        "loss": dataclasses.asdict(cfg.train.loss),
        "train": {f.name: getattr(cfg.train, f.name)
                  for f in fields(TrainConfig) if f.name not in ("model", "loss")},
        "eval": dataclasses.asdict(cfg.eval),
    }

    def clean(obj):
        if isinstance(obj, tuple):
            return [clean(v) for v in obj]
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items()}
        if isinstance(obj, list):
            return [clean(v) for v in obj]
        return obj

    return yaml.safe_dump(clean(tree), sort_keys=False)


def echo_config(cfg: RunConfig, out_dir: Path):
    """Write the effective config into the output directory."""
    Path(out_dir, "config.yaml").write_text(dump_run_config(cfg))
