"""Run configuration: a YAML document validated against a versioned schema."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "PCMAS_OUTPUT_ROOT"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SyntheticDemand(_Strict):
    rows: int = 3
    cols: int = 3
    horizon: int = 21
    hotspots: Optional[dict[int, float]] = None
    background: float = 0.3
    base_fare: float = 5.0
    fare_per_cell: float = 3.0
    seed: int = 0


class DemandSource(_Strict):
    path: Optional[str] = None
    synthetic: Optional[SyntheticDemand] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.path is None) == (self.synthetic is None):
            raise ValueError("demand needs exactly one of 'path' or 'synthetic'")
        return self


class ArchitectureCfg(_Strict):
    actor_hidden: list[int] = [32, 16, 18]
    critic_hidden: list[int] = [64, 32, 16]
    actor_hyper_hidden: list[int] = [128, 64]
    critic_hyper_hidden: list[int] = [128, 128]
    mean_hidden: list[int] = [32, 16, 8]
    activation: Literal["relu", "tanh"] = "relu"


class MfacCfg(_Strict):
    gamma: float = 1.0
    lr_actor: float = 0.00004
    lr_critic: float = 0.0003
    lr_mean: float = 0.0001
    entropy_weight: float = 0.01
    beta: float = 1.0
    reward_scale: float = 1.0
    batch_size: int = 256
    buffer_capacity: int = 100_000
    target_refresh: int = 200


class TrainCfg(_Strict):
    preset: Literal["full", "desk"] = "full"
    episodes: Optional[int] = None
    update_interval: Optional[int] = None
    updates_per_phase: Optional[int] = None
    n_c_range: Optional[tuple[int, int]] = None
    alpha_range: Optional[tuple[float, float]] = None
    architecture: Optional[ArchitectureCfg] = None
    mfac: Optional[MfacCfg] = None
    synthetic_fare: Optional[float] = None
    hourly_rate: float = 0.0
    checkpoint_every: int = 0
    nonfinite_limit: int = 20
    system: Literal["hyper", "Target", "AugTarget", "TargetLarge", "AugTargetLarge"] = "hyper"

    @field_validator("episodes")
    @classmethod
    def _nonneg(cls, v):
        if v is not None and v < 0:
            raise ValueError("episodes must be >= 0")
        return v


class BrCfg(_Strict):
    preset: Literal["full", "desk"] = "desk"
    episodes: Optional[int] = None
    patience: Optional[int] = None
    lr_actor: Optional[float] = None
    lr_critic: Optional[float] = None
    reward_scale: Optional[float] = None


class EvalCfg(_Strict):
    contexts: Optional[list[tuple[int, float]]] = None
    n_c_segments: int = 10
    alpha_segments: int = 10
    types: list[Literal["c", "u"]] = ["c", "u"]
    seeds: list[int] = [0, 1, 2]
    eval_runs: int = 100
    br: BrCfg = Field(default_factory=BrCfg)


class OptimizeCfg(_Strict):
    k_values: list[float] = [0.2, 0.4, 0.6, 0.8]
    hourly_rates: list[float] = [0.0]
    n_c_values: Optional[list[int]] = None
    alpha_values: Optional[list[float]] = None
    grid_points: int = 11
    eval_runs: int = 100


class AblateCfg(_Strict):
    contexts: list[tuple[int, float]] = [(5, 0.5)]
    eval_runs: int = 100
    k: float = 0.6
    hourly_rate: float = 0.0


class SegmentCfg(_Strict):
    budget: Optional[int] = None
    points_per_axis: int = 3
    k: float = 0.6
    hourly_rate: float = 0.0
    eval_runs: int = 100


class UtilityCfg(_Strict):
    totals: list[int] = [60, 100, 200]
    fractions: list[float] = [0.0, 0.1, 0.2, 0.3]
    alphas: list[float] = [0.0, 0.25, 0.5, 0.75, 1.0]
    eval_runs: int = 100
    episodes: Optional[int] = None


class RunConfig(_Strict):
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    total_agents: int = 100
    output_dir: str = "runs"
    workers: int = 1
    demand: DemandSource
    train: TrainCfg = Field(default_factory=TrainCfg)
    eval: EvalCfg = Field(default_factory=EvalCfg)
    optimize: OptimizeCfg = Field(default_factory=OptimizeCfg)
    ablate: AblateCfg = Field(default_factory=AblateCfg)
    segment: SegmentCfg = Field(default_factory=SegmentCfg)
    utility: UtilityCfg = Field(default_factory=UtilityCfg)

    @field_validator("schema_version")
    @classmethod
    def _version(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v}; this build reads {SCHEMA_VERSION}")
        return v

    def config_hash(self) -> str:
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def output_path(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        p = Path(self.output_dir)
        return p if p.is_absolute() or not root else Path(root) / p


def load_config(path, overrides: Optional[dict] = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    for dotted, value in (overrides or {}).items():
        node = data
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
    return RunConfig.model_validate(data)
