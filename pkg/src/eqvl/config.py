"""Run configuration document shared by all CLI subcommands."""
from __future__ import annotations

import json
import os
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .datagen import ElasticSpec, GenerationParams
from .losses import METHODS, LossConfig
from .trainer import TrainConfig
from .variability import DEFAULT_REL_EPSILON, DEFAULT_RESAMPLES, DEFAULT_WINDOW

CONFIG_VERSION = 1
SEED_ENV = "EQVL_SEED"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DatagenSection(_Strict):
    seed: int = Field(0, ge=0, lt=2 ** 64)
    size: int = Field(32, ge=8)
    n_train: int = Field(256, ge=1)
    n_validation: int = Field(32, ge=1)
    n_test: int = Field(64, ge=1)
    correlation_length: tuple[float, float] = (1.5, 3.5)
    volume_fraction: tuple[float, float] = (0.35, 0.65)
    young_modulus_soft: float = Field(1.0, gt=0)
    contrast: float = Field(10.0, ge=1)
    poisson_ratio: float = Field(0.3, gt=0, lt=0.5)
    applied_strain: tuple[float, float, float] = (0.0, 0.01, 0.0)
    tolerance: float = Field(1e-4, gt=0)
    max_iters: int = Field(2000, ge=1)

    @field_validator("size")
    @classmethod
    def _divisible(cls, v):
        if v % 8:
            raise ValueError("size must be divisible by 8 for the generator")
        return v

    def elastic_spec(self) -> ElasticSpec:
        return ElasticSpec(self.young_modulus_soft, self.contrast, self.poisson_ratio, self.applied_strain)

    def generation_params(self) -> GenerationParams:
        return GenerationParams(self.size, self.correlation_length, self.volume_fraction, self.tolerance,
                                self.max_iters)


class LossSection(_Strict):
    lambda_l1: float = Field(100.0, gt=0)
    lambda_div: float = Field(100.0, ge=0)
    atan_scale: float = Field(100.0, gt=0)
    atan_weight: float = Field(5.0, gt=0)
    sigmoid_sharpness: float = Field(100.0, gt=0)
    ema_decay: float = Field(0.99, ge=0, lt=1)


class TrainSection(_Strict):
    total_iterations: int = Field(4000, ge=1)
    checkpoint_every: int = Field(200, ge=1)
    batch_size: int = Field(4, ge=1)
    lr: float = Field(2e-4, ge=0)
    beta1: float = Field(0.5, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    width: int = Field(16, ge=1)
    save_checkpoints: bool = True
    loss: LossSection = Field(default_factory=LossSection)

    @model_validator(mode="after")
    def _divides(self):
        if self.total_iterations % self.checkpoint_every:
            raise ValueError("checkpoint_every must divide total_iterations")
        return self

    def train_config(self, method: str) -> TrainConfig:
        loss = LossConfig(method=method, **self.loss.model_dump())
        fields = self.model_dump(exclude={"loss"})
        return TrainConfig(loss=loss, **fields)


class AnalysisSection(_Strict):
    resamples: int = Field(DEFAULT_RESAMPLES, ge=1)
    rng_seed: int = Field(0, ge=0)
    rel_epsilon: float = Field(DEFAULT_REL_EPSILON, gt=0)
    window: int = Field(DEFAULT_WINDOW, ge=1)
    compare_first: int = Field(10, ge=2)


class RunConfig(_Strict):
    version: int = CONFIG_VERSION
    master_seed: int = Field(0, ge=0, lt=2 ** 64)
    output_root: str = "eqvl_out"
    methods: list[str] = Field(default_factory=lambda: list(METHODS))
    n_sessions: int = Field(16, ge=2)
    workers: int = Field(1, ge=1)
    datagen: DatagenSection = Field(default_factory=DatagenSection)
    train: TrainSection = Field(default_factory=TrainSection)
    analysis: AnalysisSection = Field(default_factory=AnalysisSection)

    @field_validator("version")
    @classmethod
    def _version(cls, v):
        if v != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {v} (expected {CONFIG_VERSION})")
        return v

    @field_validator("methods")
    @classmethod
    def _methods(cls, v):
        bad = [m for m in v if m not in METHODS]
        if bad or not v:
            raise ValueError(f"unknown methods {bad}; choose from {list(METHODS)}")
        return v

    def echo(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)


def load_config(path=None, env=None) -> RunConfig:
    """Parse ``path`` (or defaults) and apply the ``EQVL_SEED`` override."""
    env = os.environ if env is None else env
    data = json.loads(Path(path).read_text()) if path else {}
    cfg = RunConfig.model_validate(data)
    if env.get(SEED_ENV):
        cfg.master_seed = int(env[SEED_ENV])
    return cfg
