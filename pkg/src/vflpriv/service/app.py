"""HTTP front end. Runs and matrices are long jobs: submit, then poll."""

from __future__ import annotations

import threading
import uuid
from concurrent.futures import ThreadPoolExecutor

from fastapi import FastAPI, HTTPException

from vflpriv.errors import ConfigError, ReportingError, VflError
from vflpriv.service import ops
from vflpriv.service.schemas import (
    GradcheckRequest,
    GradcheckResponse,
    JobInfo,
    MatrixRequest,
    ReportRequest,
    ReportResponse,
    RunRequest,
)


class JobStore:
    """In-memory job table; one worker thread runs jobs in submission order."""

    def __init__(self, workers: int = 1):
        self._jobs: dict[str, JobInfo] = {}
        self._lock = threading.Lock()
        self._pool = ThreadPoolExecutor(max_workers=workers)

    def submit(self, kind: str, fn, req) -> JobInfo:
        job = JobInfo(id=uuid.uuid4().hex, kind=kind, status="queued")
        with self._lock:
            self._jobs[job.id] = job
        self._pool.submit(self._work, job.id, fn, req)
        return job

    def _set(self, job_id: str, **changes) -> None:
        with self._lock:
            self._jobs[job_id] = self._jobs[job_id].model_copy(update=changes)

    def _work(self, job_id, fn, req):
        self._set(job_id, status="running")
        try:
            results = fn(req)
        except ConfigError as exc:
            self._set(job_id, status="failed", error_kind="config", error=str(exc), error_path=exc.path)
        except Exception as exc:  # reported to the client, never raised in the worker
            self._set(job_id, status="failed", error_kind="runtime", error=f"{type(exc).__name__}: {exc}")
        else:
            self._set(job_id, status="done", results=results)

    def get(self, job_id: str) -> JobInfo | None:
        with self._lock:
            return self._jobs.get(job_id)


def _check_config(config: dict, seed, out) -> None:
    try:
        ops.resolve(config, seed, out)
    except ConfigError as exc:
        raise HTTPException(422, {"path": exc.path, "message": str(exc)}) from None


def create_app(workers: int = 1) -> FastAPI:
    app = FastAPI(title="vflpriv", version="0.1.0")
    store = JobStore(workers)
    app.state.jobs = store

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.post("/runs", response_model=JobInfo, status_code=202)
    def submit_run(req: RunRequest):
        _check_config(req.config, req.seed, req.out)
        return store.submit("run", ops.do_run, req)

    @app.post("/matrix", response_model=JobInfo, status_code=202)
    def submit_matrix(req: MatrixRequest):
        _check_config(req.config, req.seed, req.out)
        return store.submit("matrix", ops.do_matrix, req)

    @app.get("/jobs/{job_id}", response_model=JobInfo)
    def job(job_id: str):
        info = store.get(job_id)
        if info is None:
            raise HTTPException(404, f"no job {job_id}")
        return info

    @app.post("/gradcheck", response_model=GradcheckResponse)
    def gradcheck(req: GradcheckRequest):
        return ops.do_gradcheck(req)

    @app.post("/report", response_model=ReportResponse)
    def make_report(req: ReportRequest):
        try:
            return ops.do_report(req)
        except (ReportingError, VflError) as exc:
            raise HTTPException(422, str(exc)) from None

    return app


app = create_app()
