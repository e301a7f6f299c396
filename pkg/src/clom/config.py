"""Experiment configuration: one JSON file, validated before any work is done."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeFloat,
    NonNegativeInt,
    PositiveFloat,
    PositiveInt,
    ValidationError,
    model_validator,
)

from .data import SyntheticSpec
from .errors import ConfigError
from .margins import MarginSpec
from .model import ModelConfig
from .numcore import SgdConfig
from .protocol import LOSS_MODES, TrainConfig

METRICS = ("l1_sparsity", "mta", "transferability", "relation_mean", "cka_simple")
Activation = Literal["relu", "tanh", "none"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SyntheticSection(_Section):
    n_groups: PositiveInt = 5
    classes_per_group: PositiveInt = 4
    dim: PositiveInt = 32
    within_group_cos: float = Field(0.6, ge=-1.0, lt=1.0)
    between_group_cos: float = Field(0.1, ge=-1.0, le=1.0)
    noise_sigma: PositiveFloat = 0.1
    train_per_class: PositiveInt = 50
    test_per_class: PositiveInt = 30
    # None: follow the run seed
    seed: int | None = Field(None, ge=0, lt=2**64)

    def spec(self, run_seed: int) -> SyntheticSpec:
        fields = self.model_dump()
        fields["seed"] = run_seed if self.seed is None else self.seed
        return SyntheticSpec(**fields)


class DatasetSection(_Section):
    path: str | None = None
    synthetic: SyntheticSection | None = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.path is None) == (self.synthetic is None):
            raise ValueError("set exactly one of dataset.path and dataset.synthetic")
        return self


class SplitSection(_Section):
    base_count: PositiveInt = 12
    sessions: NonNegativeInt = 4
    classes_per_session: PositiveInt = 2
    shots: PositiveInt = 5


class ModelSection(_Section):
    hidden: list[PositiveInt] = [64]
    d: PositiveInt = 32
    d_pm: PositiveInt = 128
    batchnorm: bool = True
    final_activation: Activation = "relu"
    head_activation: Activation = "relu"
    renormalize_prototypes: bool = True
    bn_eps: PositiveFloat = 1e-5
    bn_momentum: float = Field(0.9, ge=0.0, lt=1.0)

    def build(self, in_dim: int, dual: bool) -> ModelConfig:
        return ModelConfig(in_dim=in_dim, dual=dual, **self.model_dump())


class MarginSection(_Section):
    m_ave: float = 0.0
    # None: same as m_ave (a constant margin)
    m_upper: float | None = None
    tau: PositiveFloat = 16.0

    def spec(self, lambda_pm: float = 1.0) -> MarginSpec:
        upper = self.m_ave if self.m_upper is None else self.m_upper
        return MarginSpec(self.m_ave, upper, self.tau, lambda_pm)


class HeadMarginSection(MarginSection):
    lambda_pm: NonNegativeFloat = 1.0


class SgdSection(_Section):
    learning_rate: PositiveFloat = 0.1
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: NonNegativeFloat = 5e-4
    decay_epochs: list[NonNegativeInt] = [60, 70]
    decay_factor: float = Field(0.1, gt=0.0, le=1.0)

    @model_validator(mode="after")
    def _increasing(self):
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError("decay_epochs must be strictly increasing")
        return self


class TrainSection(_Section):
    loss_mode: Literal[LOSS_MODES] = "baseline"
    nm: MarginSection = MarginSection()
    pm: HeadMarginSection = HeadMarginSection()
    epochs: NonNegativeInt = 100
    batch_size: int = Field(64, ge=2)
    sgd: SgdSection = SgdSection()
    base_prototypes: bool = True

    def build(self, seed: int, nm_ave: float | None = None, pm_ave: float | None = None) -> TrainConfig:
        nm, pm = self.nm, self.pm
        if nm_ave is not None:
            nm = nm.model_copy(update={"m_ave": nm_ave})
        if pm_ave is not None:
            pm = pm.model_copy(update={"m_ave": pm_ave})
        return TrainConfig(
            loss_mode=self.loss_mode,
            nm_spec=nm.spec(),
            pm_spec=pm.spec(pm.lambda_pm),
            epochs=self.epochs,
            batch_size=self.batch_size,
            sgd=SgdConfig(**self.sgd.model_dump()),
            seed=seed,
            base_prototypes=self.base_prototypes,
        )


class AnalysisSection(_Section):
    top_k: PositiveInt | None = None
    magnitude: bool = False
    metrics: list[Literal[METRICS]] = list(METRICS)
    checkpoint: str | None = None
    reference_checkpoint: str | None = None


class SweepSection(_Section):
    vary: Literal["nm", "nm_pm"] = "nm"
    nm_values: list[float] = Field(default=[-0.3, -0.15, 0.0, 0.15, 0.3], min_length=1)
    pm_values: list[float] = []

    @model_validator(mode="after")
    def _grid(self):
        if self.vary == "nm_pm" and not self.pm_values:
            raise ValueError("sweep.vary 'nm_pm' needs a non-empty sweep.pm_values")
        return self

    def cells(self) -> list[tuple[int, int, float, float | None]]:
        """(i, j, nm value, pm value) for every grid cell, row-major."""
        if self.vary == "nm":
            return [(i, 0, v, None) for i, v in enumerate(self.nm_values)]
        return [(i, j, a, b) for i, a in enumerate(self.nm_values) for j, b in enumerate(self.pm_values)]


class ExperimentConfig(_Section):
    dataset: DatasetSection
    split: SplitSection = SplitSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    analysis: AnalysisSection = AnalysisSection()
    sweep: SweepSection = SweepSection()
    output_dir: str = "out"
    seeds: list[int] = Field(default=[0], min_length=1)

    @model_validator(mode="after")
    def _check(self):
        if any(not 0 <= s < 2**64 for s in self.seeds):
            raise ValueError("seeds must be unsigned 64-bit integers")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if self.sweep.vary == "nm_pm" and self.train.loss_mode not in ("nm_pm", "nm_pm_relation"):
            raise ValueError("sweep.vary 'nm_pm' needs a two-branch loss_mode")
        return self

    def digest(self) -> str:
        canon = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def _flatten_errors(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_flatten_errors(exc)) from None


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)
