"""The three-phase generation loop with adaptive per-token weighting.

Phase 1 (selection): a batch of seeded starting latents is denoised, with no
weighting, down to an early checkpoint; the run restarts from the *original*
starting latent of the candidate whose attention maps score best.

Phase 2 (adaptive weighting): for the early jumps, the bounded per-token
coefficients are derived from learnable parameters (initialized to zero, so
weighting starts trivial at 1), the embedding is interpolated accordingly,
and after each evaluation the parameters take one gradient step against the
unified objective computed on that step's attention maps.

Phase 3 (no weighting): the remaining jumps run with the raw conditional
embedding, and the final latent is decoded.

Call accounting treats one denoising step as one call: the guided pair of
evaluations (conditional + unconditional) counts once, and a batched
selection step over B latents also counts once.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field

import numpy as np

from .denoiser import DenoiserState, ToyDenoiser, ToyTextEncoder, cfg_noise
from .engine import loss_and_grad, plain_loss
from .objective import LossBreakdown, ObjectiveConfig, attention_diagnostics, total_loss
from .prompts import (
    EmbeddingPair,
    PromptSpec,
    TokenWeights,
    weighted_embedding,
    weights_from_alpha,
)

VARIANTS = ("frap", "vanilla", "static_weighting", "redo_timestep")


class NonFiniteLossError(RuntimeError):
    """A weighting step produced a non-finite loss; carries diagnostics."""

    def __init__(self, message: str, diagnostic: dict):
        super().__init__(message)
        self.diagnostic = diagnostic


@dataclass(frozen=True)
class LoopConfig:
    steps: int = 50  # T, jumps from pure noise down to the clean latent
    t_end: int = 26  # last jump with adaptive weighting
    t_select: int = 36  # checkpoint jump for initial latent selection
    batch: int = 4  # candidate latents in the selection phase
    eta: float = 1.0  # gradient step size
    beta: float = 7.5  # guidance scale
    variant: str = "frap"
    static_phi: float = 1.4
    phi_lb: float = 0.6
    phi_ub: float = 1.4
    select: bool | None = None  # None: on for all variants except vanilla
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.t_end <= self.steps:
            raise ValueError(f"t_end {self.t_end} outside [1, {self.steps}]")
        if not 1 <= self.t_select <= self.steps:
            raise ValueError(f"t_select {self.t_select} outside [1, {self.steps}]")
        if self.batch < 1:
            raise ValueError("batch must be at least 1")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not self.phi_lb < self.phi_ub:
            raise ValueError("need phi_lb < phi_ub")

    @property
    def selection_enabled(self) -> bool:
        if self.select is None:
            return self.variant != "vanilla"
        return self.select

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "t_end": self.t_end,
            "t_select": self.t_select,
            "batch": self.batch,
            "eta": self.eta,
            "beta": self.beta,
            "variant": self.variant,
            "static_phi": self.static_phi,
            "phi_lb": self.phi_lb,
            "phi_ub": self.phi_ub,
            "select": self.selection_enabled,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LoopConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass(frozen=True)
class StepRecord:
    t: int
    total: float
    presence: float
    binding: float
    phi: tuple[float, ...]


@dataclass
class RunRecord:
    """Everything observable about one seeded generation."""

    prompt_id: str
    seed: int
    variant: str
    config: dict
    b_star: int | None  # 1-based winner of the selection phase
    selection_losses: list[float] | None
    steps: list[StepRecord]
    call_count: int
    wall_ms: float
    latent: np.ndarray
    image: np.ndarray  # 8-bit RGB, same pixels a PPM export carries
    proxy: dict

    def to_dict(self) -> dict:
        return {
            "prompt_id": self.prompt_id,
            "seed": self.seed,
            "variant": self.variant,
            "config": self.config,
            "b_star": self.b_star,
            "selection_losses": self.selection_losses,
            "losses": [
                {"t": s.t, "total": s.total, "presence": s.presence, "binding": s.binding}
                for s in self.steps
            ],
            "phi": [list(s.phi) for s in self.steps],
            "call_count": self.call_count,
            "wall_ms": self.wall_ms,
            "latent": self.latent.tolist(),
            "image": self.image.tolist(),
            "proxy": self.proxy,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        steps = [
            StepRecord(
                t=int(loss["t"]),
                total=loss["total"],
                presence=loss["presence"],
                binding=loss["binding"],
                phi=tuple(phi),
            )
            for loss, phi in zip(d["losses"], d["phi"])
        ]
        return cls(
            prompt_id=d["prompt_id"],
            seed=d["seed"],
            variant=d["variant"],
            config=d["config"],
            b_star=d["b_star"],
            selection_losses=d["selection_losses"],
            steps=steps,
            call_count=d["call_count"],
            wall_ms=d["wall_ms"],
            latent=np.asarray(d["latent"], dtype=np.float64),
            image=np.asarray(d["image"], dtype=np.uint8),
            proxy=d["proxy"],
        )


def prompt_id_for(prompt: PromptSpec) -> str:
    slug = re.sub(r"[^a-z0-9]+", "-", prompt.text.lower()).strip("-")
    return slug or "prompt"


def write_ppm(path, image: np.ndarray) -> None:
    """Binary 8-bit pixmap (P6) for eyeball inspection of a decoded image."""
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"expected H x W x 3 uint8 image, got {image.shape} {image.dtype}")
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def quantize_image(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def _guided_step(denoiser, state: DenoiserState, emb: np.ndarray, uncond: np.ndarray, beta: float):
    """One counted evaluation: guided noise plus the conditional attention."""
    noise_c, attn = denoiser.forward(state.z, state.t, emb)
    noise_u, _ = denoiser.forward(state.z, state.t, uncond)
    state.count_call()
    return cfg_noise(noise_c, noise_u, beta), attn


def select_latent(
    denoiser: ToyDenoiser,
    encoder: ToyTextEncoder,
    prompt: PromptSpec,
    objective_cfg: ObjectiveConfig,
    loop_cfg: LoopConfig,
    state: DenoiserState | None = None,
) -> tuple[np.ndarray, int, list[float]]:
    """Denoise a batch of candidates down to the checkpoint, score their
    attention maps, and return the winner's original starting latent.

    The returned index is 1-based; ties go to the first candidate. Each
    batched step increments the call counter once.
    """
    emb = encoder.encode(prompt)
    originals = denoiser.sample_latents(loop_cfg.seed, loop_cfg.batch)
    current = [originals[b].copy() for b in range(loop_cfg.batch)]
    counter = state if state is not None else DenoiserState(originals[0], loop_cfg.steps)

    checkpoint_attn = [None] * loop_cfg.batch
    for t in range(loop_cfg.steps, loop_cfg.t_select - 1, -1):
        for b in range(loop_cfg.batch):
            noise_c, attn = denoiser.forward(current[b], t, emb.conditional)
            noise_u, _ = denoiser.forward(current[b], t, emb.unconditional)
            current[b] = denoiser.step(current[b], t, cfg_noise(noise_c, noise_u, loop_cfg.beta))
            if t == loop_cfg.t_select:
                checkpoint_attn[b] = attn
        counter.count_call()

    losses = [
        total_loss(checkpoint_attn[b], prompt, objective_cfg).total
        for b in range(loop_cfg.batch)
    ]
    b_star = int(np.argmin(losses)) + 1
    return originals[b_star - 1].copy(), b_star, losses


def _static_phi_vector(prompt: PromptSpec, value: float) -> np.ndarray:
    phi = np.ones(prompt.n_tokens)
    for s in prompt.object_indices:
        phi[s] = value
    for _, r in prompt.modifier_pairs:
        phi[r] = value
    return phi


def run(
    denoiser: ToyDenoiser,
    encoder: ToyTextEncoder,
    prompt: PromptSpec,
    objective_cfg: ObjectiveConfig | None = None,
    loop_cfg: LoopConfig | None = None,
) -> RunRecord:
    """Execute one full seeded generation and return its record."""
    objective_cfg = objective_cfg if objective_cfg is not None else ObjectiveConfig()
    loop_cfg = loop_cfg if loop_cfg is not None else LoopConfig()
    if not prompt.object_indices:
        raise ValueError("prompt has no object tokens; the objective is undefined")

    started = time.perf_counter()
    emb = encoder.encode(prompt)
    uncond = emb.unconditional
    pid = prompt_id_for(prompt)

    state = DenoiserState(np.zeros(1), loop_cfg.steps, call_count=0)
    if loop_cfg.selection_enabled:
        z, b_star, selection_losses = select_latent(
            denoiser, encoder, prompt, objective_cfg, loop_cfg, state
        )
    else:
        z = denoiser.sample_latents(loop_cfg.seed, 1)[0]
        b_star, selection_losses = None, None

    alpha = np.zeros(prompt.n_tokens)
    records: list[StepRecord] = []
    final_attn = None

    for t in range(loop_cfg.steps, loop_cfg.t_end - 1, -1):
        state.z, state.t = z, t
        if loop_cfg.variant in ("frap", "redo_timestep"):
            weights = TokenWeights(alpha, loop_cfg.phi_lb, loop_cfg.phi_ub)
            result = loss_and_grad(denoiser, z, t, prompt, emb, weights, objective_cfg)
            _check_finite(result.loss, pid, loop_cfg.seed, t)
            records.append(_step_record(t, result.loss, result.phi))
            noise, attn = _guided_step(
                denoiser, state, weighted_embedding(emb, result.phi), uncond, loop_cfg.beta
            )
            alpha = alpha - loop_cfg.eta * result.grad
            if loop_cfg.variant == "redo_timestep":
                redo_weights = TokenWeights(alpha, loop_cfg.phi_lb, loop_cfg.phi_ub)
                redo_phi = weights_from_alpha(redo_weights, prompt.frozen_mask)
                noise, attn = _guided_step(
                    denoiser, state, weighted_embedding(emb, redo_phi), uncond, loop_cfg.beta
                )
        else:
            if loop_cfg.variant == "static_weighting":
                phi = _static_phi_vector(prompt, loop_cfg.static_phi)
                step_emb = weighted_embedding(emb, phi)
            else:  # vanilla: raw conditional embedding, coefficients all 1
                phi = np.ones(prompt.n_tokens)
                step_emb = emb.conditional
            noise, attn = _guided_step(denoiser, state, step_emb, uncond, loop_cfg.beta)
            breakdown = total_loss(attn, prompt, objective_cfg)
            _check_finite(breakdown, pid, loop_cfg.seed, t)
            records.append(_step_record(t, breakdown, phi))
        z = denoiser.step(z, t, noise)
        final_attn = attn

    for t in range(loop_cfg.t_end - 1, 0, -1):
        state.z, state.t = z, t
        noise, _ = _guided_step(denoiser, state, emb.conditional, uncond, loop_cfg.beta)
        z = denoiser.step(z, t, noise)

    image = quantize_image(denoiser.decode(z))
    proxy = _proxy_dict(final_attn, prompt, objective_cfg, records[-1].total)
    wall_ms = (time.perf_counter() - started) * 1000.0

    return RunRecord(
        prompt_id=pid,
        seed=loop_cfg.seed,
        variant=loop_cfg.variant,
        config={"loop": loop_cfg.to_dict(), "objective": objective_cfg.to_dict()},
        b_star=b_star,
        selection_losses=selection_losses,
        steps=records,
        call_count=state.call_count,
        wall_ms=wall_ms,
        latent=z,
        image=image,
        proxy=proxy,
    )


def _step_record(t: int, loss: LossBreakdown, phi: np.ndarray) -> StepRecord:
    return StepRecord(t, loss.total, loss.presence, loss.binding, tuple(float(v) for v in phi))


def _check_finite(loss: LossBreakdown, prompt_id: str, seed: int, t: int) -> None:
    if not np.isfinite(loss.total):
        raise NonFiniteLossError(
            f"non-finite loss at jump {t}",
            {
                "prompt_id": prompt_id,
                "seed": seed,
                "t": t,
                "total": loss.total,
                "presence": loss.presence,
                "binding": loss.binding,
            },
        )


def _proxy_dict(attn, prompt, objective_cfg, final_total) -> dict:
    diag = attention_diagnostics(attn, prompt, objective_cfg.kernel)
    return {
        "presence": [[int(s), v] for s, v in diag["presence"].items()],
        "binding": [[int(s), int(r), v] for (s, r), v in diag["binding"].items()],
        "final_total_loss": final_total,
    }


def line_search_probe(
    denoiser: ToyDenoiser,
    z: np.ndarray,
    t: int,
    prompt: PromptSpec,
    emb: EmbeddingPair,
    alpha: np.ndarray,
    objective_cfg: ObjectiveConfig,
    etas: list[float],
    phi_lb: float = 0.6,
    phi_ub: float = 1.4,
) -> list[tuple[float, float]]:
    """Loss along the negative gradient ray, holding the latent and jump fixed.

    Returns (eta, loss) pairs sorted by eta, always including the eta=0
    baseline. Validates that the gradient actually points downhill.
    """
    if not etas:
        raise ValueError("etas must be non-empty")
    if any(e < 0 for e in etas):
        raise ValueError("etas must be non-negative")
    weights = TokenWeights(np.asarray(alpha, dtype=np.float64), phi_lb, phi_ub)
    result = loss_and_grad(denoiser, z, t, prompt, emb, weights, objective_cfg)
    table = {0.0: result.loss.total}
    for eta in etas:
        if eta == 0.0:
            continue
        probe = weights.alpha - eta * result.grad
        table[float(eta)] = plain_loss(
            denoiser, z, t, prompt, emb, probe, weights, objective_cfg
        )
    return sorted(table.items())
