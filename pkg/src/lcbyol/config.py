"""Run configuration: one YAML file, validated, hashed and overridable from the command line."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

SCHEMA_VERSION = 1


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class AugSection(Section):
    hflip_p: float = Field(0.5, ge=0, le=1)
    vflip_p: float = Field(0.5, ge=0, le=1)
    rotate_p: float = Field(1.0, ge=0, le=1)
    jitter_p: float = Field(0.8, ge=0, le=1)
    brightness: float = Field(0.4, ge=0)
    contrast: float = Field(0.4, ge=0)
    saturation: float = Field(0.2, ge=0)
    hue: float = Field(0.2, ge=0, le=0.5)
    gray_p: float = Field(0.2, ge=0, le=1)
    blur_p: float = Field(1.0, ge=0, le=1)
    blur_kernel: int = Field(25, ge=1)
    blur_sigma: list[float] = Field(default_factory=lambda: [0.1, 2.0], min_length=2, max_length=2)

    @model_validator(mode="after")
    def _check(self):
        if self.blur_kernel % 2 == 0:
            raise ValueError("blur_kernel must be odd")
        if not 0 < self.blur_sigma[0] <= self.blur_sigma[1]:
            raise ValueError("blur_sigma must be positive and ordered")
        return self

    def policy(self):
        from .augment import AugPolicy
        return AugPolicy(**{**self.model_dump(), "blur_sigma": tuple(self.blur_sigma)})


class DatasetSection(Section):
    world_size: int = Field(2560, ge=256)
    patch: int = Field(64, ge=32)
    grid_stride: int = Field(64, ge=1)
    ref_res: int = Field(30, ge=1)
    n_classes: int = Field(8, ge=2)
    n_strata: int = Field(25, ge=1)
    samples_per_stratum: int = Field(4, ge=1)
    n_folds: int = Field(4, ge=2)
    pca_threshold: float = Field(0.95, gt=0, le=1)
    pretrain_fraction: float = Field(0.20, ge=0, le=1)
    pretrain_val_fraction: float = Field(0.05, ge=0, le=1)
    split_basis: Literal["total", "remaining"] = "total"
    n_points: int = Field(200, ge=0)
    min_dist_patch: float = Field(4.0, ge=0)
    min_dist_point: float = Field(16.0, ge=0)

    @model_validator(mode="after")
    def _check(self):
        if self.patch % 32:
            raise ValueError("patch must be a multiple of 32")
        if self.samples_per_stratum != self.n_folds:
            raise ValueError("samples_per_stratum must equal n_folds")
        if self.pretrain_fraction + self.pretrain_val_fraction > 1:
            raise ValueError("pretraining fractions sum to more than 1")
        return self


class EncoderSection(Section):
    widths: list[int] = Field(default_factory=lambda: [16, 24, 32, 48, 64], min_length=5, max_length=5)
    blocks: list[int] = Field(default_factory=lambda: [1, 1, 1, 1], min_length=4, max_length=4)

    @model_validator(mode="after")
    def _check(self):
        if min(self.widths) < 1 or min(self.blocks) < 1:
            raise ValueError("widths and blocks must be >= 1")
        return self


def desk_byol_policy():
    # class identity in the synthetic world is mostly spectral; strong hue and
    # saturation jitter would teach invariance to the main class cue
    return AugSection(brightness=0.2, contrast=0.2, saturation=0.0, hue=0.0, gray_p=0.0, blur_sigma=[0.1, 1.0])


class ByolSection(Section):
    epochs: int = Field(30, ge=1)
    base_lr: float = Field(1e-3, gt=0, le=1)
    warmup_epochs: int = Field(2, ge=0)
    batch_size: int = Field(32, ge=2)
    microbatch: int = Field(32, ge=2)
    tau_base: float = Field(0.99, ge=0, le=1)
    weight_decay: float = Field(0.01, ge=0)
    symmetrize: bool = False
    hidden: int = Field(256, ge=1)
    dim: int = Field(64, ge=1)
    augment: AugSection = Field(default_factory=desk_byol_policy)

    @model_validator(mode="after")
    def _check(self):
        if self.batch_size % self.microbatch:
            raise ValueError("batch_size must be divisible by microbatch")
        return self


class FinetuneSection(Section):
    arch: Literal["FCN", "UNET", "ATTN_UNET", "DEEPLABV3PLUS", "UPERNET", "PAN"] = "UNET"
    n_train_folds: int = Field(1, ge=1)
    max_epochs: int = Field(60, ge=1)
    batch_size: int = Field(16, ge=2)
    lr: float = Field(1e-3, gt=0, le=1)
    warmup_start_lr: float = Field(1e-4, ge=0, le=1)
    warmup_epochs: int = Field(5, ge=0)
    plateau_patience: int = Field(10, ge=1)
    plateau_factor: float = Field(0.1, gt=0, lt=1)
    early_stop_patience: int = Field(20, ge=1)
    min_delta: float = Field(1e-6, ge=0)
    weight_decay: float = Field(0.01, ge=0)
    gamma: float = Field(2.0, ge=0)
    augment: bool = True
    policy: AugSection = Field(default_factory=AugSection)
    probe_lr: float = Field(1e-2, gt=0, le=1)
    probe_stages: list[int] = Field(default_factory=lambda: [4], min_length=1)
    recalibrate_bn: bool = True

    @model_validator(mode="after")
    def _check(self):
        if self.early_stop_patience < self.plateau_patience:
            raise ValueError("early_stop_patience must be >= plateau_patience")
        if any(s not in (1, 2, 3, 4) for s in self.probe_stages):
            raise ValueError("probe_stages must be drawn from 1..4")
        return self


class MosaicSection(Section):
    patch: int = Field(64, ge=32)
    stride: int = Field(16, ge=1)
    sigma: float = Field(16.0, gt=0)
    tta: bool = True

    @model_validator(mode="after")
    def _check(self):
        if self.stride > self.patch:
            raise ValueError("stride must be <= patch")
        if self.patch % 32:
            raise ValueError("patch must be a multiple of 32")
        return self


class AssessSection(Section):
    source: Literal["raster", "model"] = "raster"


class SeedSection(Section):
    world: int = Field(0, ge=0)
    sample: int = Field(0, ge=0)
    pretrain: int = Field(0, ge=0)
    finetune: int = Field(0, ge=0)
    mosaic: int = Field(0, ge=0)


class RunConfig(Section):
    schema_version: int = SCHEMA_VERSION
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    encoder: EncoderSection = Field(default_factory=EncoderSection)
    byol: ByolSection = Field(default_factory=ByolSection)
    finetune: FinetuneSection = Field(default_factory=FinetuneSection)
    mosaic: MosaicSection = Field(default_factory=MosaicSection)
    assess: AssessSection = Field(default_factory=AssessSection)
    seeds: SeedSection = Field(default_factory=SeedSection)

    @model_validator(mode="after")
    def _check(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {self.schema_version} (expected {SCHEMA_VERSION})")
        if self.finetune.n_train_folds >= self.dataset.n_folds:
            raise ValueError("finetune.n_train_folds must be < dataset.n_folds")
        return self

    def config_hash(self) -> str:
        canon = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field path."""


def _describe(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def parse_overrides(pairs) -> dict:
    """["section.field=value", ...] -> nested dict; values are parsed as YAML scalars."""
    out: dict = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form section.field=value")
        key, raw = pair.split("=", 1)
        node = out
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def build_config(data: dict | None = None, overrides=None) -> RunConfig:
    try:
        return RunConfig.model_validate(_merge(data or {}, parse_overrides(overrides)))
    except ValidationError as exc:
        raise ConfigError(_describe(exc)) from None


def load_config(path=None, overrides=None) -> RunConfig:
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return build_config(data, overrides)


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False)
