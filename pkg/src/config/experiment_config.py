#!/usr/bin/env python3
"""
Schemas for experiment config files.

A config is a JSON document with a ``schema_version``, the ``command`` it
drives, a mandatory ``seed`` and one section per concern. Unknown keys are
rejected everywhere.
"""
import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, NonNegativeFloat, PositiveFloat, PositiveInt, ValidationError, model_validator

from config.project_config import Config
from core.errors import SchemaError

SCHEMA_VERSION = 1

Command = Literal["verify", "train", "forget", "sweep", "moments", "account"]
MethodName = Literal["spectral-moe", "zero-init-moe", "single-lora", "full-ft", "upcycled-moe"]
SchemeName = Literal["original", "principal", "minor", "random"]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class LayerSettings(StrictModel):
    total_rank: PositiveInt = 16
    n_experts: PositiveInt = 8
    top_k: PositiveInt = 2
    scale: PositiveFloat | Literal["auto"] = "auto"
    rho: PositiveFloat = Field(default_factory=lambda: Config.RHO)
    eta: PositiveFloat = Field(default_factory=lambda: Config.ETA)
    scheme: SchemeName = "original"
    scheme_seed: int | None = None
    per_expert_scaling: bool = False
    router_init: Literal["symmetric", "gaussian"] = "symmetric"
    router_std: PositiveFloat = 0.02

    @model_validator(mode="after")
    def _check_experts(self):
        if self.top_k > self.n_experts:
            raise ValueError(f"top_k={self.top_k} exceeds n_experts={self.n_experts}")
        if self.total_rank % self.n_experts:
            raise ValueError(f"total_rank={self.total_rank} is not divisible by n_experts={self.n_experts}")
        return self


class TaskSettings(StrictModel):
    m: PositiveInt = 32
    n: PositiveInt = 32
    profile: Literal["flat", "power-law", "segment", "mixed-segment"] = "segment"
    band_start: int = Field(default=0, ge=0)
    band_width: PositiveInt = 8
    noise_std: NonNegativeFloat = 0.0
    shift_scale: PositiveFloat = 0.5
    input_shift: NonNegativeFloat = 2.0
    segment_gain: PositiveFloat = 8.0
    count: PositiveInt = 2
    eval_size: PositiveInt = 512


class TrainSettings(StrictModel):
    lr: NonNegativeFloat = 0.05
    steps: PositiveInt = 300
    batch_size: PositiveInt = 32
    optimizer: Literal["sgd", "sgd-momentum"] = "sgd"
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    balance_coefficient: NonNegativeFloat = Field(default_factory=lambda: Config.BALANCE_COEFFICIENT)
    eval_every: PositiveInt = 50


class ExperimentSettings(StrictModel):
    methods: list[MethodName] = ["spectral-moe", "zero-init-moe", "single-lora"]
    seeds: list[int] = Field(default=[0, 1, 2, 3, 4], min_length=1)
    scales: list[PositiveFloat] = []
    include_dense_routing: bool = True


class VerifySettings(StrictModel):
    moment_samples: PositiveInt = 1_000_000
    moment_shards: PositiveInt = 4
    residual_samples: PositiveInt = 100_000
    residual_dim: int = Field(default=64, ge=32)
    gradient_layers: PositiveInt = 20
    surrogate_instances: PositiveInt = 10
    alignment_n: PositiveInt = 1024
    alignment_rank: PositiveInt = 8
    alignment_draws: PositiveInt = 1000
    alignment_repeats: PositiveInt = 5
    alignment_scale: PositiveFloat | Literal["auto"] = "auto"
    divergence_draws: PositiveInt = 64
    divergence_seeds: PositiveInt = 5
    first_order_layers: PositiveInt = 10


class MomentsSettings(StrictModel):
    n_experts: PositiveInt = 8
    top_k: PositiveInt = 2
    samples: PositiveInt = 1_000_000
    shards: PositiveInt = 4
    logit_scales: list[PositiveFloat] = Field(default=[1.0, 1e-6], min_length=1)

    @model_validator(mode="after")
    def _check_k(self):
        if self.top_k > self.n_experts:
            raise ValueError(f"top_k={self.top_k} exceeds n_experts={self.n_experts}")
        return self


class AccountSettings(StrictModel):
    presets: list[Literal["vit-clip", "decoder-7B"]] = ["vit-clip", "decoder-7B"]
    methods: list[Literal["full-ft", "full-ft-moe", "lora", "moe-lora", "hydra-lora", "adamole", "dora"]] = [
        "full-ft", "full-ft-moe", "lora", "moe-lora", "hydra-lora", "adamole", "dora",
    ]
    flops_batch: int = Field(default=1, ge=0)
    flops_seq: int = Field(default=2048, ge=0)


class SweepSettings(StrictModel):
    n_experts_grid: list[PositiveInt] = Field(default=[1, 2, 4, 8], min_length=1)
    top_k_grid: list[PositiveInt] = Field(default=[1, 2, 4, 8], min_length=1)
    total_rank: PositiveInt = 32


class ExperimentConfig(StrictModel):
    schema_version: Literal[1]
    command: Command
    seed: int = Field(ge=0, lt=2 ** 64)
    output_dir: str | None = None
    layer: LayerSettings = Field(default_factory=LayerSettings)
    task: TaskSettings = Field(default_factory=TaskSettings)
    train: TrainSettings = Field(default_factory=TrainSettings)
    experiment: ExperimentSettings = Field(default_factory=ExperimentSettings)
    verify: VerifySettings = Field(default_factory=VerifySettings)
    moments: MomentsSettings = Field(default_factory=MomentsSettings)
    account: AccountSettings = Field(default_factory=AccountSettings)
    sweep: SweepSettings = Field(default_factory=SweepSettings)

    def to_json(self):
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def parse_experiment_config(text, command=None, seed=None, source="<config>"):
    """Validate config text; ``seed`` overrides the file's value."""
    try:
        config = ExperimentConfig.model_validate_json(text)
        if seed is not None:
            config = ExperimentConfig.model_validate({**config.model_dump(), "seed": seed})
    except ValidationError as e:
        raise SchemaError(f"{source}: {e}") from e
    if command is not None and config.command != command:
        raise SchemaError(f"{source}: config is for command {config.command!r}, not {command!r}")
    return config


def load_experiment_config(path, command=None, seed=None):
    path = Path(path)
    return parse_experiment_config(path.read_text(encoding="utf-8"), command=command, seed=seed, source=str(path))
