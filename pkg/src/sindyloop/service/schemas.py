"""Request and response models for the HTTP service."""

from __future__ import annotations

from typing import Any, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ..regress import Trajectory


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TrajectoryPayload(_Model):
    times: list[float]
    states: list[list[float]] = Field(description="one row per sample")
    split: int = Field(description="index of the first test sample")
    inputs: list[list[float]] | None = None
    state_names: list[str] = []
    input_names: list[str] = []
    units: dict[str, str] = {}
    meta: dict[str, Any] = {}

    def to_trajectory(self) -> Trajectory:
        return Trajectory(
            times=np.asarray(self.times, dtype=float),
            states=np.asarray(self.states, dtype=float),
            split=self.split,
            inputs=None if self.inputs is None else np.asarray(self.inputs, dtype=float),
            state_names=tuple(self.state_names),
            input_names=tuple(self.input_names),
            units=dict(self.units),
            meta=dict(self.meta),
        )

    @classmethod
    def from_trajectory(cls, traj: Trajectory) -> "TrajectoryPayload":
        return cls(
            times=traj.times.tolist(),
            states=traj.states.tolist(),
            split=traj.split,
            inputs=None if traj.inputs is None else traj.inputs.tolist(),
            state_names=list(traj.state_names),
            input_names=list(traj.input_names),
            units=dict(traj.units),
            meta=dict(traj.meta),
        )


class ParseRequest(_Model):
    text: str
    n_states: int | None = Field(None, ge=1)
    n_inputs: int | None = Field(None, ge=0)


class ParseResponse(_Model):
    text: str
    canonical: str
    signature: str
    node_count: int


class ValidateRequest(_Model):
    template: dict[str, Any]
    n_states: int | None = Field(None, ge=1)
    n_inputs: int = Field(0, ge=0)
    max_terms: int = Field(8, ge=1)


class ValidateResponse(_Model):
    valid: bool
    reason: str | None = None
    detail: str | None = None
    signature: str | None = None
    complexity: float | None = None


class GenerateRequest(_Model):
    spec: dict[str, Any]
    split: float = Field(0.7, gt=0, lt=1)


class BaselineRequest(_Model):
    trajectory: TrajectoryPayload
    settings: dict[str, str] = Field(default_factory=dict, description="section.key -> value overrides")


class ReplaySource(_Model):
    kind: Literal["replay"] = "replay"
    batches: list[list[Any]]


class MutateSource(_Model):
    kind: Literal["mutate"] = "mutate"
    seed: int = 0


class RefineRequest(_Model):
    trajectory: TrajectoryPayload
    proposer: Union[ReplaySource, MutateSource] = Field(discriminator="kind")
    settings: dict[str, str] = Field(default_factory=dict)
    normalize: bool = True


class RefineResponse(_Model):
    equations: list[str]
    stop_reason: str
    iterations: int
    max_nrmse: float | str
    J: float | str
    safeguard_applied: bool
    status_counts: dict[str, int]
    log: dict[str, Any]


class BenchRow(_Model):
    system: str
    baseline_max_nrmse: float | None = None
    refined_max_nrmse: float | None = None
    baseline_r2: float | None = None
    refined_r2: float | None = None
    baseline_grade: str | None = None
    refined_grade: str | None = None
    stop_reason: str | None = None
    iterations: int | None = None
    error: str | None = None


class ReportRequest(_Model):
    results: list[BenchRow] = Field(min_length=1)
    tau: float = Field(0.1, gt=0)


class ErrorResponse(_Model):
    error: str
    detail: str
