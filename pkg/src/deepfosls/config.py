"""Run configuration: a TOML file validated against a strict schema (unknown keys are rejected)."""
from __future__ import annotations

import hashlib
import json
import sys
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigurationError
from .training import FOSLS, TrainConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ProblemSection(_Strict):
    id: Literal["smooth1d", "interface1d", "circle2d", "plane2d"] = "interface1d"
    kappa0: float = Field(3.0, gt=0)

    def params(self) -> dict:
        return {"kappa0": self.kappa0} if self.id == "interface1d" else {}


class NetworkSection(_Strict):
    layers: int = Field(1, ge=1)
    width: int = Field(16, ge=1)
    activation: str = "requ"
    m: float = Field(50.0, gt=0)
    jitter: float = Field(0.0, ge=0)
    jitter_seed: int = Field(0, ge=0)

    @field_validator("activation")
    @classmethod
    def _known(cls, v: str) -> str:
        if v.lower() == "relu":
            raise ValueError("ReLU is not C^{1,1}_loc; use 'requ' (or 'tanh')")
        if v.lower() not in ("requ", "tanh"):
            raise ValueError(f"unknown activation {v!r}; choose 'requ' or 'tanh'")
        return v.lower()


class TrainSection(_Strict):
    iterations: int = Field(2500, ge=0)
    learning_rate: float = Field(1e-4, gt=0)
    decay_factor: float = Field(1.0, gt=0, le=1)
    decay_tail: int = Field(0, ge=0)
    beta1: float = Field(0.9, gt=0, lt=1)
    beta2: float = Field(0.999, gt=0, lt=1)
    eps_adam: float = Field(1e-8, gt=0)
    mu: float = Field(1e-12, gt=0)
    epsilon_scale: float = Field(1e-15, gt=0)
    alpha1: float = Field(1e-8, gt=0)
    alpha2: float = Field(1e-10, gt=0)
    poincare_period: int = Field(100, ge=1)
    poincare_mode: Literal["estimate", "reference", "fixed"] = "estimate"
    poincare_value: Optional[float] = Field(None, gt=0)
    quadrature: Literal["p1", "mc", "trapezoid"] = "p1"
    points: Optional[int] = Field(2000, ge=2)
    cells_per_axis: Optional[List[int]] = None
    loss_kind: Literal["fosls", "deep_ritz"] = FOSLS
    log_period: int = Field(1, ge=1)

    def to_train_config(self, seed: int, fine_nodes: Optional[int], checkpoint_period: int) -> TrainConfig:
        data = self.model_dump()
        tail = data.pop("decay_tail")
        decay_start = max(self.iterations - tail, 0) if tail and self.decay_factor < 1 else None
        return TrainConfig(
            **data, decay_start=decay_start, seed=seed, fine_nodes=fine_nodes, checkpoint_period=checkpoint_period
        )


class MetricsSection(_Strict):
    fine_nodes: Optional[int] = Field(None, ge=3)
    tv_window: List[float] = [0.4, 0.6]
    tv_nodes: int = Field(4001, ge=3)
    sample_nodes: int = Field(201, ge=2)


class OutputsSection(_Strict):
    directory: str = "runs/default"
    checkpoint_period: int = Field(0, ge=0)


class FullSection(_Strict):
    """Overrides applied with ``--full`` (reproduction-scale iteration counts)."""

    iterations: Optional[int] = Field(None, ge=0)
    log_period: Optional[int] = Field(None, ge=1)


class SweepSection(_Strict):
    kappa0: List[float] = [1e-6, 1e-3, 1e3, 1e6]


class VarianceSection(_Strict):
    fosls_points: List[int] = [50, 100, 200, 400, 600]
    ritz_points: List[int] = [300, 400, 600, 1000, 2000]
    instability_error: float = Field(0.10, gt=0)
    probe_snapshots: int = Field(0, ge=0)
    probe_resamples: int = Field(100, ge=2)


class GibbsVariant(_Strict):
    label: str
    activation: str = "requ"
    layers: int = Field(1, ge=1)
    iterations: Optional[int] = Field(None, ge=0)


class GibbsSection(_Strict):
    variants: List[GibbsVariant] = [
        GibbsVariant(label="requ_L1"),
        GibbsVariant(label="requ_L2", layers=2),
        GibbsVariant(label="tanh_L1", activation="tanh", iterations=10000),
    ]


class RunConfig(_Strict):
    base_seed: int = Field(0, ge=0, lt=2**64)
    problem: ProblemSection = ProblemSection()
    network: NetworkSection = NetworkSection()
    train: TrainSection = TrainSection()
    metrics: MetricsSection = MetricsSection()
    outputs: OutputsSection = OutputsSection()
    full: FullSection = FullSection()
    sweep: SweepSection = SweepSection()
    variance: VarianceSection = VarianceSection()
    gibbs: GibbsSection = GibbsSection()

    @model_validator(mode="after")
    def _consistent(self):
        if self.train.poincare_mode == "fixed" and self.train.poincare_value is None:
            raise ValueError("poincare_mode 'fixed' needs poincare_value")
        return self

    def train_config(self, seed: Optional[int] = None) -> TrainConfig:
        try:
            return self.train.to_train_config(
                self.base_seed if seed is None else seed, self.metrics.fine_nodes, self.outputs.checkpoint_period
            )
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc

    def with_full(self) -> "RunConfig":
        train = self.train.model_copy(
            update={k: v for k, v in self.full.model_dump().items() if v is not None}
        )
        return self.model_copy(update={"train": train})

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.model_dump(), sort_keys=True).encode()).hexdigest()[:16]


def parse_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(f"invalid configuration:\n{exc}") from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: malformed TOML: {exc}") from exc
    return parse_config(data)
