"""Run configuration: schema, loading and hashing.

Configs are YAML or JSON files validated before any work starts. Unknown
keys are rejected at every level.
"""

from __future__ import annotations

import hashlib
import json
import os
from datetime import date
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .glm import PIPELINES
from .panel import DEFAULT_ACTORS, DEFAULT_CODES, DEFAULT_LAT_CENTROIDS, DEFAULT_LON_CENTROIDS, DEFAULT_ORIGIN
from .prior import PriorConfig
from .sampler import SamplerConfig

OUTPUT_ROOT_ENV = "SPILLCOUNT_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SimulateSection(_Section):
    t_total: int = 1000
    t_train: int = 950
    noise_lambda: float = Field(1.5, gt=0)
    alpha_true: float = Field(0.5, gt=0)
    burn_in: int = Field(10, ge=0)

    @model_validator(mode="after")
    def _split(self):
        if not 0 < self.t_train < self.t_total:
            raise ValueError(f"t_train ({self.t_train}) must be positive and below t_total ({self.t_total})")
        if self.burn_in >= self.t_train:
            raise ValueError("burn_in must be below t_train")
        return self


class PanelSection(_Section):
    events: str | None = None
    delimiter: str = ","
    has_header: bool = True
    fieldnames: list[str] | None = None
    column_map: dict[str, str] = Field(default_factory=dict)
    actors: list[str] = Field(default_factory=lambda: list(DEFAULT_ACTORS))
    codes: list[str] = Field(default_factory=lambda: list(DEFAULT_CODES))
    origin: date = DEFAULT_ORIGIN
    lat_centroids: list[float] = Field(default_factory=lambda: list(DEFAULT_LAT_CENTROIDS))
    lon_centroids: list[float] = Field(default_factory=lambda: list(DEFAULT_LON_CENTROIDS))
    lat_step: float = Field(5.0, gt=0)
    lon_step: float = Field(10.0, gt=0)
    n_weeks: int | None = Field(None, ge=1)
    train_end: date | None = None
    val_weeks: int = Field(52, ge=0)

    @field_validator("column_map")
    @classmethod
    def _known_fields(cls, v):
        allowed = {"timestamp", "action_lat", "action_lon", "actor1", "root_code"}
        unknown = set(v) - allowed
        if unknown:
            raise ValueError(f"unknown record fields in column_map: {sorted(unknown)}")
        return v


class PriorSection(_Section):
    sigma_fixed: float = Field(100.0, gt=0)
    alpha_shape: float = Field(1.0, gt=0)
    alpha_rate: float = Field(10.0, gt=0)
    tpbn_u: float = Field(0.5, gt=0)
    tpbn_a: float = Field(0.5, gt=0)
    tau0: float = Field(0.5, gt=0)

    def build(self) -> PriorConfig:
        return PriorConfig(**self.model_dump())


class ModelSection(_Section):
    pipeline: Literal["two-step", "ar2", "full-glm"] = "two-step"
    targets: list[str] | None = None
    family: Literal["NB2", "ZINB2"] | None = None
    families: dict[str, Literal["NB2", "ZINB2"]] = Field(default_factory=dict)
    lags: list[int] = Field(default_factory=lambda: [1, 2])
    candidates: list[str] | None = None
    delta: float = Field(0.0, ge=0)
    level: float = Field(0.95, gt=0, lt=1)
    start_week: int | None = Field(None, ge=0)
    external: dict[str, str] = Field(default_factory=dict)
    external_kind: Literal["embedding", "calendar"] = "embedding"
    priors: PriorSection = Field(default_factory=PriorSection)

    @field_validator("lags")
    @classmethod
    def _lags(cls, v):
        if any(l < 1 for l in v) or len(set(v)) != len(v):
            raise ValueError("lags must be distinct positive integers")
        return v


class SamplerSection(_Section):
    num_warmup: int = Field(1000, ge=1)
    num_samples: int = Field(6000, ge=1)
    num_chains: int = Field(1, ge=1)
    target_accept: float = Field(0.8, gt=0, lt=1)
    max_tree_depth: int = Field(10, ge=1)
    max_divergence_rate: float = Field(0.05, ge=0, le=1)

    def build(self, seed: int) -> SamplerConfig:
        d = self.model_dump()
        d.pop("max_divergence_rate")
        return SamplerConfig(seed=seed, **d)


class PredictiveSection(_Section):
    q: float = Field(0.975, gt=0, lt=1)
    split: Literal["train", "val", "test"] = "test"
    oracle: bool = False
    refit_every: int | None = Field(None, ge=1)
    n_oracle_draws: int = Field(6000, ge=1)


class DirectionalSection(_Section):
    n_sectors: int = Field(16, ge=2)
    level: float = Field(0.95, gt=0, lt=1)
    magnitude_bins: int = Field(4, ge=1)


class RunConfig(_Section):
    seed: int = Field(0, ge=0, lt=2**63)
    output_dir: str = "spillcount-out"
    workers: int | None = Field(None, ge=1)
    simulate: SimulateSection = Field(default_factory=SimulateSection)
    panel: PanelSection = Field(default_factory=PanelSection)
    model: ModelSection = Field(default_factory=ModelSection)
    sampler: SamplerSection = Field(default_factory=SamplerSection)
    predictive: PredictiveSection = Field(default_factory=PredictiveSection)
    directional: DirectionalSection = Field(default_factory=DirectionalSection)

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()[:16]

    def output_root(self) -> Path:
        """Output directory; the ``SPILLCOUNT_OUTPUT_ROOT`` environment variable overrides it."""
        env = os.environ.get(OUTPUT_ROOT_ENV)
        return Path(env) if env else Path(self.output_dir)


assert set(PIPELINES) == {"two-step", "ar2", "full-glm"}


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Read and validate a config file (YAML or JSON); ``None`` gives the defaults."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML/JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for dotted, value in (overrides or {}).items():
        node = data
        keys = dotted.split(".")
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
