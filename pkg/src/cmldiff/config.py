"""Versioned experiment configuration (JSON) with strict key checking."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists ``path: message`` entries."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GeometryConfig(_Strict):
    d: int = Field(1, ge=1, le=3)
    M: int = Field(512, ge=2)


class ModelConfig(_Strict):
    a: float = Field(0.25, ge=0.0)
    eps: float = Field(1.0 / 16, ge=0.0)
    kappa: float = Field(0.0, ge=0.0)
    variant: Literal["doubling", "cat"] = "doubling"
    coupling: Literal["diffusive", "antisymmetric"] = "diffusive"
    observable: Literal["cos", "biased"] = "cos"


class RGConfig(_Strict):
    L: int = Field(4, ge=2)
    n_max: int = Field(3, ge=1)
    column_stride: int = Field(4, ge=1)
    window_cells: float = Field(2.0, gt=0.0)


class SamplingConfig(_Strict):
    n_seeds: int = Field(8, ge=1)
    n_samples: int = Field(64, ge=1)
    burn_in: int = Field(64, ge=0)
    steps: int = Field(1000, ge=1)
    snapshot_every: int = Field(250, ge=1)
    observable: str = "cos"
    lags: list[int] = Field(default_factory=lambda: list(range(1, 9)))
    separations: list[int] = Field(default_factory=lambda: [1, 2, 4, 8])

    @field_validator("lags", "separations")
    @classmethod
    def _positive(cls, v):
        if not v or min(v) < 1:
            raise ValueError("must be a nonempty list of positive integers")
        return v


class VerificationConfig(_Strict):
    test_functions: list[str] = Field(default_factory=lambda: ["one", "gauss", "cos_a", "cos_b", "bump"])
    delta: float = Field(1.0, gt=0.0)
    tolerances: dict[str, float] = Field(default_factory=dict)


class OutputConfig(_Strict):
    dir: str = "out"
    max_bytes: int = Field(1 << 30, ge=1)


class ExperimentConfig(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    seed: int = Field(0, ge=0, lt=1 << 64)
    geometry: GeometryConfig = GeometryConfig()
    model: ModelConfig = ModelConfig()
    rg: RGConfig = RGConfig()
    sampling: SamplingConfig = SamplingConfig()
    verification: VerificationConfig = VerificationConfig()
    output: OutputConfig = OutputConfig()

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def content_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def _problems(err: ValidationError) -> list[str]:
    out = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        out.append(f"{path}: {e['msg']}")
    return out


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(_problems(err)) from None


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Read a JSON config; ``None`` gives the defaults."""
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError([f"<file>: cannot read {path}: {err.strerror}"]) from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError([f"<file>: invalid JSON at line {err.lineno} column {err.colno}: {err.msg}"]) from None
    if not isinstance(data, dict):
        raise ConfigError(["<root>: top level must be an object"])
    return parse_config(data)
