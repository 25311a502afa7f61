#!/usr/bin/env python3
"""
Config - Run configuration models, file loading, flag overrides and variant rules.

Config files are JSON (any YAML subset works too, they go through yaml.safe_load)
and are validated by pydantic. ``load_run_config`` applies CLI overrides and the
variant rules, so callers only ever see a resolved ``RunConfig``.
"""
import json
import logging
import math
import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from errors import ConfigError, UnknownVariantError

logger = logging.getLogger(__name__)

__version__ = "0.4.0"

DEFAULT_OUT_ROOT = "runs"


class SharingMode(str, Enum):
    INDEPENDENT = "independent"
    SHARED_BN = "shared-bn"
    SHARED_STOCHASTIC = "shared-stochastic"


class Variant(str, Enum):
    CO_DA = "co-da"
    CO_DA_BN = "co-da-bn"
    CO_DA_SH = "co-da-sh"
    VADA_SINGLE = "vada-single"
    CO_DA_NODIV = "co-da-nodiv"
    SOURCE_ONLY = "source-only"


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class LossWeights(_Model):
    lambda_d: float = Field(1e-2, ge=0)
    lambda_p: float = Field(1e-2, ge=0)
    lambda_div: float = Field(1e-2, ge=0)
    lambda_ce: float = Field(1e-2, ge=0)
    lambda_sv: float = Field(1.0, ge=0)
    nu: float = 10.0
    eps_vat_source: float = Field(3.5, ge=0)
    eps_vat_target: float = Field(3.5, ge=0)
    beta_dirt: float = Field(1e-2, ge=0)

    @field_validator("nu", mode="before")
    @classmethod
    def _parse_nu(cls, value: Any) -> Any:
        if isinstance(value, str) and value.strip().lower() in ("inf", "infinity", "+inf"):
            return math.inf
        return value

    @field_validator("nu")
    @classmethod
    def _check_nu(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("nu must be > 0 (use 'inf' for the uncapped ablation)")
        return value


class ArchConfig(_Model):
    kind: Literal["auto", "dense", "conv"] = "auto"
    hidden: int = Field(64, ge=1)
    conv_channels: Tuple[int, int, int] = (32, 32, 64)
    disc_hidden: int = Field(100, ge=1)
    noise_std: float = Field(1.0, ge=0)
    dropout: float = Field(0.5, ge=0, lt=1)
    batchnorm: bool = True
    instance_norm: bool = True
    leaky_slope: float = Field(0.1, ge=0)
    bn_momentum: float = Field(0.99, gt=0, lt=1)
    bn_eps: float = Field(1e-5, gt=0)
    precision: Literal["float64", "float32"] = "float64"


class TrainConfig(_Model):
    iterations: int = Field(3000, ge=0)
    batch_size: int = Field(64, ge=2)
    seed: int = 0
    eval_every: int = Field(100, ge=1)
    lr: float = Field(1e-3, gt=0)
    beta1: float = Field(0.5, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    ema_momentum: float = Field(0.998, ge=0, lt=1)
    vat_xi: float = Field(1e-6, gt=0)
    same_init: bool = False
    checkpoint_every: int = Field(0, ge=0)
    weights: LossWeights = Field(default_factory=LossWeights)
    sharing: SharingMode = SharingMode.INDEPENDENT
    members: int = Field(2, ge=1, le=2)


class DirtTConfig(_Model):
    iterations: int = Field(1000, ge=0)
    refresh_interval: int = Field(500, ge=1)
    batch_size: Optional[int] = Field(None, ge=2)


class ShiftSpec(_Model):
    family: Literal["two-moons", "gaussian-blobs", "patch-blend-images"] = "two-moons"
    rotation_deg: float = Field(35.0, ge=0, le=90)
    translation: Tuple[float, float] = (0.0, 0.0)
    noise_std: float = Field(0.1, ge=0)
    n_per_class: int = Field(1000, ge=1)
    n_classes: int = Field(2, ge=2)
    blob_radius: float = Field(2.0, gt=0)
    patch_seed: int = 0
    seed: int = 0

    @model_validator(mode="after")
    def _check_counts(self) -> "ShiftSpec":
        k = self.classes()
        if self.n_per_class * k < 2 * k:
            raise ValueError(f"sample count {self.n_per_class * k} below 2K={2 * k}")
        return self

    def classes(self) -> int:
        if self.family == "two-moons":
            return 2
        if self.family == "patch-blend-images":
            return 4
        return self.n_classes


class IdxPaths(_Model):
    source_images: str
    source_labels: str
    target_images: str
    target_labels: Optional[str] = None


class DataConfig(_Model):
    shift: Optional[ShiftSpec] = None
    idx: Optional[IdxPaths] = None
    validation_size: int = Field(0, ge=0)

    @model_validator(mode="before")
    @classmethod
    def _default_shift(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("idx") is None and data.get("shift") is None:
            data = {**data, "shift": {}}
        return data

    @model_validator(mode="after")
    def _one_source(self) -> "DataConfig":
        if self.idx is not None and self.shift is not None:
            raise ValueError("data takes either 'shift' or 'idx', not both")
        return self


class ProbeConfig(_Model):
    enabled: bool = True
    k_values: List[int] = Field(default_factory=lambda: [1, 3, 5, 10])
    pca_dims: int = Field(50, ge=1)
    max_samples: int = Field(2000, ge=2)

    @field_validator("k_values")
    @classmethod
    def _positive_k(cls, values: List[int]) -> List[int]:
        if not values or any(k < 1 for k in values):
            raise ValueError("k_values must be a non-empty list of integers >= 1")
        return sorted(set(values))


class GridSpec(_Model):
    axes: Dict[str, List[float]] = Field(default_factory=dict)
    workers: int = Field(1, ge=1)

    @field_validator("axes")
    @classmethod
    def _known_axes(cls, axes: Dict[str, List[Any]]) -> Dict[str, List[Any]]:
        for name, values in axes.items():
            if name not in LossWeights.model_fields:
                raise ValueError(f"unknown grid axis {name!r}; expected one of {sorted(LossWeights.model_fields)}")
            if not values:
                raise ValueError(f"grid axis {name!r} is empty")
        return axes


class RunConfig(_Model):
    name: str = "run"
    variant: Variant = Variant.CO_DA
    out_dir: str = DEFAULT_OUT_ROOT
    data: DataConfig = Field(default_factory=DataConfig)
    arch: ArchConfig = Field(default_factory=ArchConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    dirtt: DirtTConfig = Field(default_factory=DirtTConfig)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
    grid: Optional[GridSpec] = None

    def dump(self) -> str:
        """Stable JSON text of the resolved config (nu=inf is written as Infinity)."""
        data = self.model_dump(mode="json")
        # json mode turns inf into null; keep the sentinel so the file reloads
        data["train"]["weights"]["nu"] = self.train.weights.nu
        return json.dumps(data, indent=2)


def apply_variant(cfg: RunConfig) -> RunConfig:
    """Enforce the weight/sharing rules attached to each method variant."""
    train = cfg.train
    w = train.weights.model_copy()
    members, sharing = 2, train.sharing
    if cfg.variant == Variant.CO_DA:
        sharing = SharingMode.INDEPENDENT
    elif cfg.variant == Variant.CO_DA_BN:
        sharing = SharingMode.SHARED_BN
    elif cfg.variant == Variant.CO_DA_SH:
        sharing = SharingMode.SHARED_STOCHASTIC
        w.lambda_div = 0.0
    elif cfg.variant == Variant.CO_DA_NODIV:
        sharing = SharingMode.INDEPENDENT
        w.lambda_div = 0.0
    elif cfg.variant == Variant.VADA_SINGLE:
        members, sharing = 1, SharingMode.INDEPENDENT
        w.lambda_p = 0.0
        w.lambda_div = 0.0
    elif cfg.variant == Variant.SOURCE_ONLY:
        members, sharing = 1, SharingMode.INDEPENDENT
        w.lambda_p = w.lambda_div = w.lambda_d = w.lambda_ce = w.lambda_sv = 0.0
    resolved_train = train.model_copy(update={"weights": w, "members": members, "sharing": sharing})
    return cfg.model_copy(update={"train": resolved_train})


def _format_validation(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        where = ".".join(str(p) for p in item["loc"]) or "<root>"
        lines.append(f"  {where}: {item['msg']}")
    return "invalid config:\n" + "\n".join(lines)


def _check_variant(value: Any) -> None:
    if value is not None and value not in {v.value for v in Variant}:
        raise UnknownVariantError(f"unknown variant {value!r}; expected one of {[v.value for v in Variant]}")


def read_config_file(config_path: Optional[str]) -> Dict[str, Any]:
    """Load a JSON/YAML config file into a plain dict."""
    if config_path is None:
        return {}
    try:
        with open(config_path, "r") as f:
            raw = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {config_path}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"malformed config {config_path}: {e}") from None
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"malformed config {config_path}: top level must be an object")
    logger.info(f"Loaded configuration from {config_path}")
    return raw


def build_run_config(raw: Dict[str, Any], overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Merge flag overrides into ``raw``, validate and apply the variant rules."""
    raw = json.loads(json.dumps(raw))  # private deep copy
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    _check_variant(overrides.get("variant", raw.get("variant")))

    raw.setdefault("out_dir", os.getenv("CODA_OUT", DEFAULT_OUT_ROOT))
    if "out" in overrides:
        raw["out_dir"] = overrides["out"]
    if "variant" in overrides:
        raw["variant"] = overrides["variant"]
    train = raw.setdefault("train", {})
    if not isinstance(train, dict):
        raise ConfigError("invalid config:\n  train: must be an object")
    if "seed" in overrides:
        train["seed"] = overrides["seed"]
    if "iterations" in overrides:
        train["iterations"] = overrides["iterations"]
    if "k" in overrides:
        raw.setdefault("probe", {})["k_values"] = list(overrides["k"])

    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(_format_validation(e)) from None
    return apply_variant(cfg)


def load_run_config(config_path: Optional[str], overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    load_dotenv()
    return build_run_config(read_config_file(config_path), overrides)


def log_level_from_env(default: str = "INFO") -> str:
    return os.getenv("LOG_LEVEL", default).upper()


def write_resolved(cfg: RunConfig, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.dump() + "\n")
    (run_dir / "version").write_text(__version__ + "\n")
