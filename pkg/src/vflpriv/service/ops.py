"""The operations behind each endpoint, callable in-process."""

from __future__ import annotations

from pathlib import Path

from vflpriv.config import ExperimentConfig, config_from_dict
from vflpriv.nn.gradcheck import gradcheck_sweep
from vflpriv.runner import RunResult, find_runs, report, run_experiment, run_matrix
from vflpriv.service.schemas import (
    GradcheckCase,
    GradcheckRequest,
    GradcheckResponse,
    MatrixRequest,
    ReportRequest,
    ReportResponse,
    RunRequest,
    RunSummary,
)


def resolve(config: dict, seed: int | None, out: str | None) -> ExperimentConfig:
    data = dict(config)
    if seed is not None:
        data["seed"] = seed
    if out is not None:
        data["output_dir"] = out
    return config_from_dict(data)


def default_out(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir) if cfg.output_dir else Path("runs") / cfg.config_hash()[:12]


def summarize_result(r: RunResult) -> RunSummary:
    return RunSummary(arm=r.arm, config_hash=r.config_hash, out_dir=str(r.out_dir) if r.out_dir else None,
                      metric=r.metric, rows=r.rows, **r.summary)


def do_run(req: RunRequest) -> list[RunSummary]:
    cfg = resolve(req.config, req.seed, req.out)
    out = default_out(cfg)
    result = run_experiment(cfg, out, log_features=req.log_features)
    result.out_dir = out
    return [summarize_result(result)]


def do_matrix(req: MatrixRequest) -> list[RunSummary]:
    cfg = resolve(req.config, req.seed, req.out)
    out = default_out(cfg)
    results = run_matrix(cfg, req.arms, out, jobs=req.jobs)
    for r in results:
        r.out_dir = out / r.arm
    return [summarize_result(r) for r in results]


def do_gradcheck(req: GradcheckRequest) -> GradcheckResponse:
    cases = gradcheck_sweep(req.cases, req.seed)
    worst = max(c["max_rel_error"] for c in cases)
    return GradcheckResponse(passed=worst < req.tolerance, worst=worst, tolerance=req.tolerance,
                             cases=[GradcheckCase(**c) for c in cases])


def do_report(req: ReportRequest) -> ReportResponse:
    scatter, curves = report(req.runs, req.out)
    return ReportResponse(scatter=str(scatter), curves=str(curves), runs=len(find_runs(req.runs)))
