from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, get_args

import numpy as np
from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, computed_field, field_validator, model_validator

from .errors import ConfigError
from .splitting import ErrorSequence, StepSchedule
from .vectorspace import parse_vector

ExperimentName = Literal[
    "simulate",
    "verify-bounds",
    "verify-lemma",
    "flow-convergence",
    "benilan",
    "almost-orbit",
    "equivalence",
]

EXPERIMENTS: List[str] = list(get_args(ExperimentName))


class ScheduleSpec(BaseModel):
    """Step sizes; with ``relative`` the constant / c are multiples of Theta."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["constant", "power", "explicit"] = "constant"
    lam: Optional[float] = Field(default=None, gt=0.0)
    count: Optional[int] = Field(default=None, ge=0)
    c: Optional[float] = Field(default=None, gt=0.0)
    p: Optional[float] = Field(default=None, gt=0.0)
    values: Optional[List[float]] = None
    relative: bool = False

    @model_validator(mode="after")
    def _check_kind(self) -> "ScheduleSpec":
        if self.kind == "constant" and self.lam is None:
            raise ValueError("constant schedule needs lam")
        if self.kind == "power" and (self.c is None or self.p is None):
            raise ValueError("power schedule needs c and p")
        if self.kind == "explicit" and not self.values:
            raise ValueError("explicit schedule needs values")
        return self

    def build(self, Theta: float) -> StepSchedule:
        scale = Theta if self.relative else 1.0
        if self.relative and not np.isfinite(Theta):
            raise ValueError("relative schedule on a problem with Theta = inf")
        if self.kind == "constant":
            return StepSchedule.constant(self.lam * scale, self.count)
        if self.kind == "power":
            return StepSchedule.power(self.c * scale, self.p)
        return StepSchedule.explicit([v * scale for v in self.values])


class ErrorSpec(BaseModel):
    """eps_k: none, scale * k^(-decay) * direction, or an explicit list."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["none", "power", "explicit"] = "none"
    scale: float = 1.0
    decay: float = 2.0
    direction: Optional[List[float]] = None
    values: Optional[List[List[float]]] = None

    def build(self, dim: int) -> ErrorSequence:
        if self.kind == "none":
            return ErrorSequence.none(dim)
        if self.kind == "power":
            direction = self.direction if self.direction is not None else [1.0] + [0.0] * (dim - 1)
            seq = ErrorSequence.power_decay(self.scale, self.decay, direction)
        else:
            seq = ErrorSequence.explicit(self.values or [])
        if seq.dim != dim:
            raise ValueError(f"error sequence lives in R^{seq.dim}, problem in R^{dim}")
        return seq


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    experiment: ExperimentName
    seed: int = Field(..., ge=0)
    problem: str = "linear1d"
    params: Dict[str, Any] = Field(default_factory=dict)

    schedule: ScheduleSpec = Field(default_factory=lambda: ScheduleSpec(kind="constant", lam=0.5, relative=True))
    schedule_hat: Optional[ScheduleSpec] = None
    errors: ErrorSpec = Field(default_factory=ErrorSpec)
    errors_hat: Optional[ErrorSpec] = None

    k: int = Field(default=100, ge=0)
    l: Optional[int] = Field(default=None, ge=0)
    m_values: List[int] = Field(default_factory=lambda: [4, 16, 64, 256])
    horizon: float = Field(default=1.0, gt=0.0)
    grid_points: int = Field(default=100, ge=2)
    t_max: float = Field(default=10.0, gt=0.0)
    k_max: int = Field(default=10_000, ge=1)
    t_values: List[float] = Field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0, 16.0])
    h_delta: float = Field(default=0.25, gt=0.0)
    h_max: float = Field(default=8.0, ge=0.0)

    tol: float = Field(default=1e-9, gt=0.0)
    flow_tol: float = Field(default=1e-2, gt=0.0)
    limit_tol: float = Field(default=2e-3, gt=0.0)
    trials: int = Field(default=100, ge=1)

    x0: Optional[List[float]] = None
    x0_hat: Optional[List[float]] = None
    u: Optional[List[float]] = None
    x0_set: Optional[List[List[float]]] = None

    output: Optional[str] = None
    jobs: Optional[int] = Field(default=None, ge=1)

    @field_validator("x0", "x0_hat", "u", mode="before")
    @classmethod
    def _comma_vector(cls, value: Any) -> Any:
        # X0=1.0,2.0 наравне с JSON-списком
        if isinstance(value, str):
            return parse_vector(value).tolist()
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return [float(value)]
        return value

    @field_validator("m_values")
    @classmethod
    def _positive_m(cls, value: List[int]) -> List[int]:
        if not value or any(m < 1 for m in value):
            raise ValueError("m_values must be a non-empty list of integers >= 1")
        return sorted(value)

    @field_validator("t_values")
    @classmethod
    def _positive_t(cls, value: List[float]) -> List[float]:
        if not value or any(not t > 0.0 for t in value):
            raise ValueError("t_values must be a non-empty list of positive reals")
        return sorted(value)

    @property
    def first_length(self) -> int:
        return self.k

    @property
    def second_length(self) -> int:
        return self.l if self.l is not None else self.k

    @classmethod
    def from_file(cls, path: str | Path, overrides: Dict[str, Any] | None = None) -> "ExperimentConfig":
        """Load a flat KEY=VALUE file; values that parse as JSON are decoded."""
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        raw = dotenv_values(p)
        data: Dict[str, Any] = {}
        for key, value in raw.items():
            if value is None:
                raise ConfigError(f"{p}: key {key!r} has no value")
            data[key.strip().lower()] = _decode(value)
        data.update(overrides or {})
        return cls.model_validate(data)


def _decode(value: str) -> Any:
    text = value.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


CriterionStatus = Literal["verified", "failed", "skipped"]


class Criterion(BaseModel):
    name: str
    passed: bool
    worst: float
    threshold: float
    detail: str = ""
    # skipped: на этой задаче проверять не с чем, запуск не проваливает
    status: CriterionStatus = "verified"

    @model_validator(mode="after")
    def _status_matches(self) -> "Criterion":
        if self.status == "skipped" and not self.passed:
            raise ValueError(f"skipped criterion {self.name} cannot be a failure")
        if self.status != "skipped" and self.passed != (self.status == "verified"):
            raise ValueError(f"criterion {self.name}: status {self.status} contradicts passed={self.passed}")
        return self


class RunSummary(BaseModel):
    experiment: str
    problem: str
    seed: int
    criteria: List[Criterion] = Field(default_factory=list)
    wall_time: float = 0.0
    artifacts: Dict[str, str] = Field(default_factory=dict, description="путь -> sha256")
    partial: bool = False
    notes: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _unique_criteria(self) -> "RunSummary":
        names = [c.name for c in self.criteria]
        if len(names) != len(set(names)):
            raise ValueError(f"duplicate criteria in summary: {names}")
        return self

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.criteria)

    @computed_field
    @property
    def skipped(self) -> List[str]:
        return [c.name for c in self.criteria if c.status == "skipped"]

    def describe(self) -> str:
        lines = [f"{self.experiment} on {self.problem} (seed {self.seed}): {'PASS' if self.passed else 'FAIL'}"]
        for c in self.criteria:
            mark = {"verified": "ok", "failed": "FAILED", "skipped": "skipped"}[c.status]
            lines.append(f"  [{mark}] {c.name}: worst={c.worst:.6g} threshold={c.threshold:.6g} {c.detail}".rstrip())
        if self.skipped:
            lines.append(f"  skipped: {', '.join(self.skipped)}")
        lines.append(f"  wall time {self.wall_time:.3f}s")
        return "\n".join(lines)
