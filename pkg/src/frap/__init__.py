"""Adaptive per-token prompt weighting for diffusion inference, desk scale.

The package couples a pluggable toy denoiser with an online weighting loop:
per-token coefficients are bounded through a sigmoid, applied by embedding
interpolation, and updated each step by the gradient of a cross-attention
objective that rewards object presence and object-modifier binding.
"""

__version__ = "0.1.0"

from .denoiser import DenoiserBackend, Schedule, ToyDenoiser, ToyTextEncoder, cfg_noise
from .engine import grad_check, loss_and_grad
from .grids import GaussianKernel
from .loop import LoopConfig, RunRecord, line_search_probe, run, select_latent
from .objective import LossBreakdown, ObjectiveConfig, total_loss
from .prompts import (
    EmbeddingPair,
    PromptSpec,
    TokenWeights,
    expand_template,
    parse_annotated,
    weighted_embedding,
    weights_from_alpha,
)

__all__ = [
    "__version__",
    "DenoiserBackend",
    "GaussianKernel",
    "Schedule",
    "ToyDenoiser",
    "ToyTextEncoder",
    "cfg_noise",
    "grad_check",
    "loss_and_grad",
    "LoopConfig",
    "RunRecord",
    "line_search_probe",
    "run",
    "select_latent",
    "LossBreakdown",
    "ObjectiveConfig",
    "total_loss",
    "EmbeddingPair",
    "PromptSpec",
    "TokenWeights",
    "expand_template",
    "parse_annotated",
    "weighted_embedding",
    "weights_from_alpha",
]
