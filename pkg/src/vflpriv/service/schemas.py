"""Request and response bodies shared by the HTTP service and the CLI."""

from __future__ import annotations

from typing import Any, Literal, Optional

from pydantic import BaseModel, Field


class RunRequest(BaseModel):
    config: dict[str, Any]
    seed: Optional[int] = Field(None, ge=0, lt=2**64)
    out: Optional[str] = None
    log_features: bool = False


class MatrixRequest(BaseModel):
    config: dict[str, Any]
    arms: list[str] = ["baseline", "naive", "basic", "fbs"]
    seed: Optional[int] = Field(None, ge=0, lt=2**64)
    out: Optional[str] = None
    jobs: int = Field(1, ge=1)


class GradcheckRequest(BaseModel):
    cases: int = Field(24, ge=1)
    seed: int = Field(0, ge=0)
    tolerance: float = Field(1e-4, gt=0)


class ReportRequest(BaseModel):
    runs: str
    out: str


class RunSummary(BaseModel):
    arm: str
    config_hash: str
    out_dir: Optional[str]
    metric: Optional[str]
    min_privacy: Optional[float]
    final_accuracy: float
    accuracy_drop_vs_baseline: Optional[float]
    rows: list[dict[str, Any]]


class GradcheckCase(BaseModel):
    layers: list[str]
    loss: str
    max_rel_error: float


class GradcheckResponse(BaseModel):
    passed: bool
    worst: float
    tolerance: float
    cases: list[GradcheckCase]


class ReportResponse(BaseModel):
    scatter: str
    curves: str
    runs: int


JobStatus = Literal["queued", "running", "done", "failed"]


class JobInfo(BaseModel):
    id: str
    kind: Literal["run", "matrix"]
    status: JobStatus
    error_kind: Optional[Literal["config", "runtime"]] = None
    error: Optional[str] = None
    error_path: Optional[str] = None
    results: list[RunSummary] = []
