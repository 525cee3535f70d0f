"""Request handlers shared by the HTTP routes and the in-process CLI client.

Each handler maps a request model onto the core package and wraps the result
in the matching response model. Domain validation errors surface as
``ValueError`` subclasses; the HTTP layer translates them to 4xx responses.
"""

from __future__ import annotations

from .. import engine, harness
from ..loop import LoopConfig, run
from ..denoiser import ToyDenoiser, ToyTextEncoder
from ..objective import ObjectiveConfig
from ..prompts import PromptSpec, expand_template, parse_annotated
from . import schemas


def handle_run(req: schemas.RunRequest) -> schemas.RunRecordModel:
    if req.prompt_markup is not None:
        prompt = parse_annotated(req.prompt_markup)
    else:
        prompt = PromptSpec.from_dict(req.prompt_spec)
    loop_cfg = LoopConfig.from_dict({**req.loop.as_dict(), "seed": req.seed})
    objective_cfg = ObjectiveConfig.from_dict(req.objective.as_dict())
    denoiser = ToyDenoiser(seed=req.denoiser_seed)
    encoder = ToyTextEncoder(seed=req.encoder_seed)
    record = run(denoiser, encoder, prompt, objective_cfg, loop_cfg)
    return schemas.RunRecordModel(**record.to_dict())


def handle_batch(req: schemas.BatchRequest) -> schemas.BatchResponse:
    config = harness.experiment_from_dict(req.config)
    summary = harness.run_batch(config, write_files=req.write_files)
    return schemas.BatchResponse(**summary.to_dict())


def handle_ablate(req: schemas.AblateRequest) -> schemas.AblateResponse:
    config = harness.experiment_from_dict(req.config)
    result = harness.ablate(config, req.variants, write_files=req.write_files)
    return schemas.AblateResponse(rows=result.rows)


def handle_dataset(req: schemas.DatasetRequest) -> schemas.DatasetResponse:
    specs = expand_template(req.template, req.vocabulary, req.seed)
    return schemas.DatasetResponse(prompts=[s.to_dict() for s in specs])


def handle_gradcheck(req: schemas.GradCheckRequest) -> schemas.GradCheckResponse:
    report = engine.grad_check(trials=req.trials, h=req.h, tol=req.tol, seed=req.seed)
    return schemas.GradCheckResponse(**report.to_dict())


def handle_report(req: schemas.ReportRequest) -> schemas.ReportResponse:
    rows, aggregates = harness.parse_summary_csv(req.csv_text)
    table = harness.format_table(rows + aggregates, list(harness.CSV_COLUMNS))
    return schemas.ReportResponse(table=table)
