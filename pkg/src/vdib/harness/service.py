"""HTTP job service. Every CLI subcommand is a job submitted here."""

from __future__ import annotations

import json
import logging
import threading
import traceback
import uuid
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Literal

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from ..checkpoint import load_checkpoint
from ..errors import ConfigError, ContractViolation, ParseError
from .config import ExperimentConfig, build_config, config_to_dict, read_config_file
from .experiments import (
    SWEEP_AXES,
    evaluate_checkpoint,
    export_representations,
    generate_dataset,
    run_experiment,
    summarize_sweep,
    sweep,
    task_samples,
)
from .gradcheck import SCOPES, gradcheck

log = logging.getLogger(__name__)

JobKind = Literal["train", "eval", "sweep", "gradcheck", "gen-data", "export-repr"]
ErrorKind = Literal["check", "config", "io", "internal"]
EXIT_CODES = {None: 0, "check": 1, "internal": 1, "config": 2, "io": 3}


class JobRequest(BaseModel):
    kind: JobKind
    config: dict[str, Any] | None = None  # inline table, merged under the overrides
    config_path: str | None = None
    preset: Literal["desk", "paper"] | None = None
    overrides: list[str] = Field(default_factory=list)
    # per-kind arguments
    checkpoint: str | None = None
    out: str | None = None
    axis: str | None = None
    values: list[Any] = Field(default_factory=list)
    scope: str = "all"
    n: int = Field(10, ge=0)
    seed: int = 0
    full: bool = False
    workers: int = Field(1, ge=1)


class JobStatus(BaseModel):
    id: str
    kind: JobKind
    state: Literal["queued", "running", "succeeded", "failed"]
    result: dict[str, Any] | None = None
    error: str | None = None
    error_kind: ErrorKind | None = None
    exit_code: int | None = None


class ErrorBody(BaseModel):
    error_kind: ErrorKind
    detail: str
    exit_code: int


def classify(exc: BaseException) -> ErrorKind:
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, (OSError, ParseError)):
        return "io"
    if isinstance(exc, ContractViolation):
        return "check"
    return "internal"


def resolve_config(req: JobRequest) -> ExperimentConfig | None:
    """Preset <- file <- inline config <- checkpoint config (eval/export) <- overrides."""
    if req.kind == "gradcheck":
        if req.scope not in SCOPES:
            raise ConfigError(f"unknown gradcheck scope {req.scope!r}; expected one of {SCOPES}")
        return None
    base: dict = {}
    scale = req.preset
    if req.config_path is not None:
        base.update(read_config_file(req.config_path))
    base.update(req.config or {})
    if req.kind in ("eval", "export-repr"):
        if req.checkpoint is None:
            raise ConfigError(f"{req.kind} needs a checkpoint")
        if not base and scale is None:
            _, meta = load_checkpoint(req.checkpoint)
            base = dict(meta.get("config") or {})
    scale = base.pop("preset", scale)
    if not base and scale is None:
        scale = "desk"
    cfg = build_config(base, req.overrides, scale)
    if req.kind == "sweep":
        if req.axis not in SWEEP_AXES:
            raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {req.axis!r}")
        if not req.values:
            raise ConfigError("sweep needs at least one value")
    if req.kind in ("gen-data", "export-repr") and req.out is None:
        raise ConfigError(f"{req.kind} needs an output path")
    return cfg


def execute(req: JobRequest, cfg: ExperimentConfig | None) -> tuple[dict, ErrorKind | None]:
    """Run one job synchronously; returns (result, error kind for a failed check or None)."""
    if req.kind == "gradcheck":
        report = gradcheck(req.scope)
        return report.to_dict(), None if report.passed else "check"
    if req.kind == "train":
        art = run_experiment(cfg, req.out, req.workers)
        return art.model_dump(), None
    if req.kind == "eval":
        return {"metrics": evaluate_checkpoint(cfg, req.checkpoint),
                "config": config_to_dict(cfg)}, None
    if req.kind == "sweep":
        rows = sweep(cfg, req.axis, req.values, req.out, req.workers)
        means = summarize_sweep(rows)
        return {"rows": rows, "csv": req.out,
                "means": {str(k): v for k, v in means.items()}}, None
    if req.kind == "gen-data":
        path = generate_dataset(cfg, req.n, req.out, req.seed)
        return {"path": str(path), "n": req.n}, None
    if req.kind == "export-repr":
        path = export_representations(req.checkpoint, task_samples(cfg, req.n, req.seed),
                                      req.out, req.full, req.seed)
        return {"path": str(path)}, None
    raise ConfigError(f"unknown job kind {req.kind!r}")  # pragma: no cover


def _plain(obj):
    """numpy scalars/arrays -> JSON-native types, so results always serialize."""
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def jsonable(result: dict) -> dict:
    return json.loads(json.dumps(result, default=_plain))


class JobManager:
    """Jobs run one at a time on a worker thread; status is kept in memory."""

    def __init__(self, workers: int = 1):
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="vdib-job")
        self._jobs: dict[str, JobStatus] = {}
        self._lock = threading.Lock()

    def submit(self, req: JobRequest, cfg: ExperimentConfig | None) -> JobStatus:
        job = JobStatus(id=uuid.uuid4().hex, kind=req.kind, state="queued")
        with self._lock:
            self._jobs[job.id] = job
        self._pool.submit(self._run, job.id, req, cfg)
        return job.model_copy()

    def _update(self, job_id: str, **changes):
        with self._lock:
            self._jobs[job_id] = self._jobs[job_id].model_copy(update=changes)

    def _run(self, job_id: str, req: JobRequest, cfg):
        self._update(job_id, state="running")
        try:
            result, kind = execute(req, cfg)
        except Exception as exc:  # reported to the client, never raised in the worker
            kind = classify(exc)
            if kind == "internal":
                log.error("job %s crashed:\n%s", job_id, traceback.format_exc())
            self._update(job_id, state="failed", error=str(exc) or type(exc).__name__,
                         error_kind=kind, exit_code=EXIT_CODES[kind])
            return
        self._update(job_id, state="succeeded" if kind is None else "failed",
                     result=jsonable(result), error_kind=kind, exit_code=EXIT_CODES[kind],
                     error=None if kind is None else "one or more checks failed")

    def get(self, job_id: str) -> JobStatus | None:
        with self._lock:
            job = self._jobs.get(job_id)
            return None if job is None else job.model_copy()

    def list(self) -> list[JobStatus]:
        with self._lock:
            return [j.model_copy() for j in self._jobs.values()]

    def shutdown(self):
        self._pool.shutdown(wait=True)


def create_app(manager: JobManager | None = None) -> FastAPI:
    app = FastAPI(title="vdib", version="0.1.0")
    app.state.jobs = manager or JobManager()

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok"}

    @app.post("/jobs", response_model=JobStatus, status_code=202,
              responses={400: {"model": ErrorBody}, 404: {"model": ErrorBody}})
    def submit(req: JobRequest):
        try:
            cfg = resolve_config(req)
        except Exception as exc:
            kind = classify(exc)
            if kind == "internal":
                raise
            status = 404 if isinstance(exc, FileNotFoundError) else 400
            body = ErrorBody(error_kind=kind, detail=str(exc), exit_code=EXIT_CODES[kind])
            return JSONResponse(body.model_dump(), status_code=status)
        return app.state.jobs.submit(req, cfg)

    @app.get("/jobs", response_model=list[JobStatus])
    def list_jobs():
        return app.state.jobs.list()

    @app.get("/jobs/{job_id}", response_model=JobStatus)
    def get_job(job_id: str):
        job = app.state.jobs.get(job_id)
        if job is None:
            raise HTTPException(404, f"no job {job_id}")
        return job

    return app
