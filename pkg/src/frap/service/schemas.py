"""Request and response models for the generation service."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field, model_validator


class LoopOverrides(BaseModel):
    steps: Optional[int] = None
    t_end: Optional[int] = None
    t_select: Optional[int] = None
    batch: Optional[int] = None
    eta: Optional[float] = None
    beta: Optional[float] = None
    variant: Optional[str] = None
    static_phi: Optional[float] = None
    phi_lb: Optional[float] = None
    phi_ub: Optional[float] = None
    select: Optional[bool] = None

    def as_dict(self) -> dict:
        return {k: v for k, v in self.model_dump().items() if v is not None}


class ObjectiveOverrides(BaseModel):
    lam: Optional[float] = None
    presence_variant: Optional[str] = None
    binding_variant: Optional[str] = None
    kernel_size: Optional[int] = None
    kernel_sigma: Optional[float] = None

    def as_dict(self) -> dict:
        d = {k: v for k, v in self.model_dump().items() if v is not None}
        kernel = {}
        if "kernel_size" in d:
            kernel["size"] = d.pop("kernel_size")
        if "kernel_sigma" in d:
            kernel["sigma"] = d.pop("kernel_sigma")
        if kernel:
            d["kernel"] = kernel
        return d


class RunRequest(BaseModel):
    prompt_markup: Optional[str] = None
    prompt_spec: Optional[dict] = None
    seed: int = 0
    loop: LoopOverrides = Field(default_factory=LoopOverrides)
    objective: ObjectiveOverrides = Field(default_factory=ObjectiveOverrides)
    denoiser_seed: int = 1234
    encoder_seed: int = 1234

    @model_validator(mode="after")
    def _one_prompt_source(self):
        if (self.prompt_markup is None) == (self.prompt_spec is None):
            raise ValueError("provide exactly one of prompt_markup or prompt_spec")
        return self


class StepLoss(BaseModel):
    t: int
    total: float
    presence: float
    binding: float


class RunRecordModel(BaseModel):
    prompt_id: str
    seed: int
    variant: str
    config: dict
    b_star: Optional[int]
    selection_losses: Optional[list[float]]
    losses: list[StepLoss]
    phi: list[list[float]]
    call_count: int
    wall_ms: float
    latent: list
    image: list
    proxy: dict


class BatchRequest(BaseModel):
    config: dict
    write_files: bool = True


class BatchResponse(BaseModel):
    out_dir: str
    csv_path: str
    rows: list[dict]
    aggregates: list[dict]
    failures: list[dict]


class AblateRequest(BaseModel):
    config: dict
    variants: list[str]
    write_files: bool = True


class AblateResponse(BaseModel):
    rows: list[dict]


class DatasetRequest(BaseModel):
    template: str
    vocabulary: dict[str, list[str]]
    seed: int = 0


class DatasetResponse(BaseModel):
    prompts: list[dict]


class GradCheckRequest(BaseModel):
    trials: int = 100
    h: float = 1e-4
    tol: float = 1e-4
    seed: int = 0


class GradCheckResponse(BaseModel):
    h: float
    tol: float
    trials: int
    n_passed: int
    max_abs_err: float
    max_rel_err: float
    passed: bool


class ReportRequest(BaseModel):
    csv_text: str


class ReportResponse(BaseModel):
    table: str


class HealthResponse(BaseModel):
    status: str
    version: str
