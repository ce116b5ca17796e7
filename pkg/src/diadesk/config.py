"""Experiment configuration files (JSON).

Schema (every section and key optional; defaults shown)::

    {
      "method": "dia",                      # or "finetune"
      "output_dir": "runs/default",
      "dataset": {                          # DatasetSpec
        "source": "synthetic",              # or "raw": reads <path>/train.bin, <path>/eval.bin
        "path": null,
        "num_classes": 10, "train_per_class": 200, "eval_per_class": 50,
        "image_size": 16, "channels": 1, "noise": 0.15, "max_shift": 2,
        "seed": 0, "template_seed": null
      },
      "split": {"num_tasks": 5, "seed": null},   # null -> dataset seed
      "train": { ...TrainConfig fields... },
      "ablation": {
        "no_pdl": false, "no_pfr": false, "gaussian_fr": false,
        "pdl_variant": null, "beta": null, "lam": null
      },
      "backbone": {
        "checkpoint": "builtin",            # shipped pretrained weights, a file path, or null
        "seed": 0,                          # init seed when checkpoint is null
        "config": { ...BackboneConfig fields... }
      }
    }

Unknown keys and ill-typed values raise ``ConfigError`` naming the dotted key.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from .data import DatasetSpec
from .errors import ConfigError, DiaError
from .pipeline import TrainConfig
from .vit import BackboneConfig

CONFIG_SCHEMA_VERSION = 1
METHODS = ("dia", "finetune")


@dataclass(frozen=True)
class AblationFlags:
    no_pdl: bool = False
    no_pfr: bool = False
    gaussian_fr: bool = False
    pdl_variant: str | None = None
    beta: float | None = None
    lam: float | None = None

    def apply(self, cfg: TrainConfig) -> TrainConfig:
        over: dict[str, Any] = {}
        if self.no_pdl:
            over["use_pdl"] = False
        if self.no_pfr:
            over["use_pfr"] = False
        if self.gaussian_fr:
            over["feature_source"] = "gaussian"
        for key in ("pdl_variant", "beta", "lam"):
            if getattr(self, key) is not None:
                over[key] = getattr(self, key)
        return replace(cfg, **over)


@dataclass(frozen=True)
class BackboneSpec:
    checkpoint: str | None = "builtin"
    seed: int = 0
    config: BackboneConfig = field(default_factory=BackboneConfig)


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "dia"
    output_dir: str = "runs/default"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    num_tasks: int = 5
    split_seed: int | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)

    @property
    def effective_train(self) -> TrainConfig:
        return self.ablation.apply(self.train)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["split"] = {"num_tasks": d.pop("num_tasks"), "seed": d.pop("split_seed")}
        d["schema_version"] = CONFIG_SCHEMA_VERSION
        return d


def _typed(cls, raw: Any, section: str, nested: dict | None = None):
    """Build dataclass ``cls`` from a mapping, checking key names and scalar types."""
    if not isinstance(raw, dict):
        raise ConfigError("expected an object", section)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        dotted = f"{section}.{key}"
        if key not in fields:
            raise ConfigError("unknown key", dotted)
        if nested and key in nested:
            kwargs[key] = nested[key](value, dotted)
            continue
        default = getattr(cls(), key) if _constructible(cls) else None
        _check_type(value, default, fields[key], dotted)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(str(exc).split(": ", 1)[-1], f"{section}.{exc.key}") from exc
    except (DiaError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc), section) from exc


def _constructible(cls) -> bool:
    try:
        cls()
        return True
    except Exception:
        return False


def _check_type(value, default, f, dotted) -> None:
    hint = str(f.type)
    if value is None:
        if "None" in hint:
            return
        raise ConfigError("may not be null", dotted)
    if isinstance(default, bool) or hint == "bool":
        ok = isinstance(value, bool)
    elif isinstance(default, int) or hint.startswith("int"):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float) or hint.startswith("float"):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str) or hint.startswith("str"):
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"wrong type {type(value).__name__} (expected {hint})", dotted)


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("top level must be an object")
    allowed = {"schema_version", "method", "output_dir", "dataset", "split", "train", "ablation", "backbone"}
    for key in raw:
        if key not in allowed:
            raise ConfigError("unknown key", key)
    if raw.get("schema_version", CONFIG_SCHEMA_VERSION) != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"unsupported version (expected {CONFIG_SCHEMA_VERSION})", "schema_version")
    method = raw.get("method", "dia")
    if method not in METHODS:
        raise ConfigError(f"expected one of {METHODS}", "method")
    output_dir = raw.get("output_dir", "runs/default")
    if not isinstance(output_dir, str):
        raise ConfigError("expected a string", "output_dir")

    split = raw.get("split", {})
    if not isinstance(split, dict):
        raise ConfigError("expected an object", "split")
    for key in split:
        if key not in ("num_tasks", "seed"):
            raise ConfigError("unknown key", f"split.{key}")
    num_tasks = split.get("num_tasks", 5)
    split_seed = split.get("seed")
    if not isinstance(num_tasks, int) or isinstance(num_tasks, bool) or num_tasks < 1:
        raise ConfigError("must be a positive integer", "split.num_tasks")
    if split_seed is not None and (not isinstance(split_seed, int) or isinstance(split_seed, bool)):
        raise ConfigError("must be an integer or null", "split.seed")

    dataset = _typed(DatasetSpec, raw.get("dataset", {}), "dataset")
    if num_tasks > dataset.num_classes:
        raise ConfigError(f"cannot exceed dataset.num_classes={dataset.num_classes}", "split.num_tasks")
    backbone = _typed(
        BackboneSpec,
        raw.get("backbone", {}),
        "backbone",
        nested={"config": lambda v, k: _typed(BackboneConfig, v, k)},
    )
    cfg = ExperimentConfig(
        method=method,
        output_dir=output_dir,
        dataset=dataset,
        num_tasks=num_tasks,
        split_seed=split_seed,
        train=_typed(TrainConfig, raw.get("train", {}), "train"),
        ablation=_typed(AblationFlags, raw.get("ablation", {}), "ablation"),
        backbone=backbone,
    )
    try:
        cfg.effective_train
    except ConfigError as exc:
        raise ConfigError(str(exc).split(": ", 1)[-1], f"ablation.{exc.key}") from exc
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    return config_from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
