"""HTTP surface over the generation package.

Every endpoint is a thin wrapper around a handler in
:mod:`frap.service.handlers`; the CLI calls the same handlers in-process, so
behavior is identical whether requests arrive over the wire or not. Runs are
deterministic and CPU-bound, so the routes are plain synchronous functions.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..harness import ConfigError, ReportError
from ..prompts import PromptError
from . import handlers, schemas


def create_app() -> FastAPI:
    app = FastAPI(
        title="frap",
        description="Adaptive per-token prompt weighting over a toy diffusion backend",
        version=__version__,
    )

    def guard(fn, req):
        try:
            return fn(req)
        except (ConfigError, ReportError, PromptError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/run", response_model=schemas.RunRecordModel)
    def run(req: schemas.RunRequest):
        return guard(handlers.handle_run, req)

    @app.post("/batch", response_model=schemas.BatchResponse)
    def batch(req: schemas.BatchRequest):
        return guard(handlers.handle_batch, req)

    @app.post("/ablate", response_model=schemas.AblateResponse)
    def ablate(req: schemas.AblateRequest):
        return guard(handlers.handle_ablate, req)

    @app.post("/datasets/expand", response_model=schemas.DatasetResponse)
    def datasets_expand(req: schemas.DatasetRequest):
        return guard(handlers.handle_dataset, req)

    @app.post("/gradcheck", response_model=schemas.GradCheckResponse)
    def gradcheck(req: schemas.GradCheckRequest):
        return guard(handlers.handle_gradcheck, req)

    @app.post("/report", response_model=schemas.ReportResponse)
    def report(req: schemas.ReportRequest):
        return guard(handlers.handle_report, req)

    return app


app = create_app()
