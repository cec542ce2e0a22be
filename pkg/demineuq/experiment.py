"""Declarative experiment config: YAML in, validated pydantic models out.

Everything a run needs lives in one ``ExperimentConfig``. ``--set`` style
overrides and the ``--seed`` master override operate on the raw mapping
before validation, so constraint errors always name the dotted field path.
"""
from __future__ import annotations

import copy
import hashlib
import logging
from pathlib import Path
from typing import Any, Literal, Sequence

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .attacks import AttackConfig
from .classifier import ArchConfig, TrainConfig
from .config import get_config
from .datasets import NoiseSpec, SplitSpec, default_class_names
from .errors import ConfigValidationError, UnknownAxisError
from .mc_dropout import MCConfig

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

SEED_OFFSETS = {"dataset": 0, "split": 1, "train": 2, "mc": 3, "attack": 10, "noise": 20, "train_noise": 30}


class DatasetSection(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    source: Literal["synthetic", "directory"] = "synthetic"
    root: str | None = None
    class_names: tuple[str, ...] | None = None
    class_count: int = Field(4, ge=2)
    per_class: int = Field(250, ge=1)
    resolution: int = Field(64, ge=16)
    seed: int = Field(0, ge=0)
    split: SplitSpec = SplitSpec(seed=1)
    train_noise: NoiseSpec | None = None
    train_noise_fraction: float = Field(1.0, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _source_fields(self) -> "DatasetSection":
        if self.source == "directory" and (not self.root or not self.class_names):
            raise ValueError("directory datasets need root and class_names")
        if self.class_names is not None and len(self.class_names) != self.class_count:
            raise ValueError(f"class_names has {len(self.class_names)} entries, class_count is {self.class_count}")
        return self

    def names(self) -> tuple[str, ...]:
        return self.class_names or default_class_names(self.class_count)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    schema_version: int = SCHEMA_VERSION
    name: str = "experiment"
    seed: int | None = Field(None, ge=0)
    dataset: DatasetSection = DatasetSection()
    arch: ArchConfig = ArchConfig()
    train: TrainConfig = TrainConfig(seed=2)
    mc: MCConfig = MCConfig(seed=3)
    attacks: tuple[AttackConfig, ...] = ()
    noise: tuple[NoiseSpec, ...] = ()
    thresholds: tuple[float, ...] = ()
    flag_percentile: float = Field(95.0, gt=0.0, lt=100.0)
    export_attack_images: bool = False
    output_dir: str = Field(default_factory=lambda: get_config().OUTPUT_DIR)

    @field_validator("schema_version")
    @classmethod
    def _known_schema(cls, v: int) -> int:
        if v != SCHEMA_VERSION:
            raise ValueError(f"schema_version {v} is not supported (expected {SCHEMA_VERSION})")
        return v

    @field_validator("thresholds")
    @classmethod
    def _non_negative(cls, v: tuple[float, ...]) -> tuple[float, ...]:
        if any(t < 0 for t in v):
            raise ValueError("thresholds must be >= 0")
        return tuple(sorted(v))

    @model_validator(mode="after")
    def _consistent(self) -> "ExperimentConfig":
        if self.arch.class_count != self.dataset.class_count:
            raise ValueError(f"arch.class_count {self.arch.class_count} != dataset.class_count "
                             f"{self.dataset.class_count}")
        if self.arch.resolution != self.dataset.resolution:
            raise ValueError(f"arch.resolution {self.arch.resolution} != dataset.resolution "
                             f"{self.dataset.resolution}")
        return self


def _format_errors(e: ValidationError) -> tuple[str, str | None]:
    parts, first = [], None
    for err in e.errors():
        loc = ".".join(str(p) for p in err["loc"])
        first = first or loc or None
        got = err.get("input")
        shown = "" if isinstance(got, (dict, list)) else f" (got {got!r})"
        parts.append(f"{loc or 'config'}: {err['msg']}{shown}")
    return "; ".join(parts), first


def parse_config(data: dict | None) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data or {})
    except ValidationError as e:
        message, field = _format_errors(e)
        raise ConfigValidationError(f"invalid config: {message}", field=field) from e


def load_config(path: str | Path | None, overrides: Sequence[str] = (), seed: int | None = None,
                output_dir: str | None = None) -> ExperimentConfig:
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigValidationError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigValidationError(f"could not parse {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigValidationError(f"{path} must hold a mapping at the top level")
    if seed is not None:
        data = apply_master_seed(data, seed)
    data = apply_overrides(data, overrides)
    if output_dir is not None:
        data["output_dir"] = str(output_dir)
    return parse_config(data)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return cfg.model_dump(mode="json")


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def config_hash(cfg: ExperimentConfig) -> str:
    """Short digest of everything except where outputs go."""
    data = config_to_dict(cfg)
    data.pop("output_dir", None)
    return hashlib.sha256(yaml.safe_dump(data, sort_keys=True).encode("utf-8")).hexdigest()[:8]


def _walk(data: Any, parts: Sequence[str], create: bool) -> tuple[Any, str | int]:
    node = data
    for part in parts[:-1]:
        if isinstance(node, list):
            node = node[int(part)]
        else:
            if part not in node or node[part] is None:
                if not create:
                    raise KeyError(part)
                node[part] = {}
            node = node[part]
    last = parts[-1]
    return node, (int(last) if isinstance(node, list) else last)


def apply_overrides(data: dict, overrides: Sequence[str]) -> dict:
    """Apply ``a.b.c=value`` assignments; values follow YAML scalar rules."""
    data = copy.deepcopy(data)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise ConfigValidationError(f"override must look like section.field=value, got {item!r}")
        parts = key.strip().split(".")
        try:
            node, last = _walk(data, parts, create=True)
            node[last] = yaml.safe_load(raw)
        except (IndexError, ValueError, TypeError) as e:
            raise ConfigValidationError(f"cannot apply override {item!r}: {e}", field=key.strip()) from e
    return data


def apply_master_seed(data: dict, seed: int) -> dict:
    """Rewrite every seed from one master seed with fixed offsets."""
    data = copy.deepcopy(data)
    data["seed"] = seed
    dataset = data.setdefault("dataset", {}) or {}
    data["dataset"] = dataset
    dataset["seed"] = seed + SEED_OFFSETS["dataset"]
    dataset.setdefault("split", {})
    dataset["split"] = {**(dataset["split"] or {}), "seed": seed + SEED_OFFSETS["split"]}
    if dataset.get("train_noise"):
        dataset["train_noise"] = {**dataset["train_noise"], "seed": seed + SEED_OFFSETS["train_noise"]}
    data["train"] = {**(data.get("train") or {}), "seed": seed + SEED_OFFSETS["train"]}
    data["mc"] = {**(data.get("mc") or {}), "seed": seed + SEED_OFFSETS["mc"]}
    data["attacks"] = [{**a, "seed": seed + SEED_OFFSETS["attack"] + k} for k, a in enumerate(data.get("attacks") or [])]
    data["noise"] = [{**n, "seed": seed + SEED_OFFSETS["noise"] + k} for k, n in enumerate(data.get("noise") or [])]
    return data


def collect_seeds(cfg: ExperimentConfig) -> dict:
    seeds = {
        "master": cfg.seed,
        "dataset": cfg.dataset.seed,
        "split": cfg.dataset.split.seed,
        "train": cfg.train.seed,
        "mc": cfg.mc.seed,
        "attacks": [a.seed for a in cfg.attacks],
        "noise": [n.seed for n in cfg.noise],
    }
    if cfg.dataset.train_noise is not None:
        seeds["train_noise"] = cfg.dataset.train_noise.seed
    return seeds


def check_axis(cfg: ExperimentConfig, axis: str) -> None:
    try:
        node, last = _walk(config_to_dict(cfg), axis.split("."), create=False)
        _ = node[last]
    except (KeyError, IndexError, ValueError, TypeError) as e:
        raise UnknownAxisError(f"unknown sweep axis {axis!r}") from e


def with_value(cfg: ExperimentConfig, axis: str, value: Any, **updates: Any) -> ExperimentConfig:
    check_axis(cfg, axis)
    data = config_to_dict(cfg)
    node, last = _walk(data, axis.split("."), create=False)
    node[last] = value
    data.update(updates)
    return parse_config(data)
