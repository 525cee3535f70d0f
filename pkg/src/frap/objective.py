"""The unified attention objective and its ablation variants.

The total loss at one step combines an object-presence term (one minus the
peak of each object token's smoothed attention map, averaged over objects)
and an object-modifier binding term (the normalized overlap between the two
pixel-probability distributions, averaged over pairs). Overlap-style binding
enters the total with a negative sign (maximize overlap); divergence variants
enter with a positive sign (minimize divergence), so lower total is always
better.

Every formula here is written with the same elementary operation order as the
taped version in :mod:`frap.engine`, so the two paths agree bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grids import GaussianKernel, align_to, grid_max, pixel_softmax, smooth
from .prompts import PromptSpec

PRESENCE_VARIANTS = ("mean_max", "max_only", "total_variation", "none")
BINDING_VARIANTS = ("min_overlap", "jsd", "kld", "none")
DIVERGENCE_VARIANTS = ("jsd", "kld")

PROB_FLOOR = 1e-12


class ObjectiveError(ValueError):
    """Raised when the objective is undefined for the given prompt."""


@dataclass(frozen=True)
class ObjectiveConfig:
    lam: float = 1.0  # weight on the binding term
    presence_variant: str = "mean_max"
    binding_variant: str = "min_overlap"
    kernel: GaussianKernel = field(default_factory=GaussianKernel)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam must be non-negative, got {self.lam}")
        if self.presence_variant not in PRESENCE_VARIANTS:
            raise ValueError(f"unknown presence variant {self.presence_variant!r}")
        if self.binding_variant not in BINDING_VARIANTS:
            raise ValueError(f"unknown binding variant {self.binding_variant!r}")

    @property
    def divergence_binding(self) -> bool:
        return self.binding_variant in DIVERGENCE_VARIANTS

    def to_dict(self) -> dict:
        return {
            "lam": self.lam,
            "presence_variant": self.presence_variant,
            "binding_variant": self.binding_variant,
            "kernel": {"size": self.kernel.size, "sigma": self.kernel.sigma},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectiveConfig":
        kernel = d.get("kernel", {})
        return cls(
            lam=d.get("lam", 1.0),
            presence_variant=d.get("presence_variant", "mean_max"),
            binding_variant=d.get("binding_variant", "min_overlap"),
            kernel=GaussianKernel(kernel.get("size", 3), kernel.get("sigma", 0.5)),
        )


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    presence: float
    binding: float
    per_object_presence: dict[int, float]
    per_pair_binding: dict[tuple[int, int], float]


def overlap(p: np.ndarray, q: np.ndarray) -> float:
    """Sum of element-wise minima of two distributions; 1 iff identical."""
    return float(np.minimum(p, q).sum())


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    pf = np.maximum(p, PROB_FLOOR)
    qf = np.maximum(q, PROB_FLOOR)
    return float((pf * (np.log(pf) - np.log(qf))).sum())


def jensen_shannon(p: np.ndarray, q: np.ndarray) -> float:
    m = (p + q) / 2.0
    return (_kl(p, m) + _kl(q, m)) / 2.0


def symmetric_kl(p: np.ndarray, q: np.ndarray) -> float:
    return (_kl(p, q) + _kl(q, p)) / 2.0


def total_variation_score(smoothed: np.ndarray) -> float:
    """Total variation of a smoothed map, normalized to be scale-free."""
    n = smoothed.shape[0]
    tv = float(np.abs(np.diff(smoothed, axis=0)).sum()) + float(
        np.abs(np.diff(smoothed, axis=1)).sum()
    )
    denom = float(smoothed.max()) * (2.0 * n * (n - 1))
    return tv / denom


def presence_loss(map_s: np.ndarray, cfg: ObjectiveConfig) -> float:
    """Per-object presence loss on a raw attention slice."""
    g = smooth(map_s, cfg.kernel)
    if cfg.presence_variant == "total_variation":
        # negated so that minimizing the total encourages high variation
        return -total_variation_score(g)
    return 1.0 - grid_max(g)


def binding_loss(map_s: np.ndarray, map_r: np.ndarray, cfg: ObjectiveConfig) -> float:
    """Per-pair binding loss between an object slice and a modifier slice."""
    g_s = smooth(map_s, cfg.kernel)
    g_r = smooth(map_r, cfg.kernel)
    p = pixel_softmax(g_s)
    q = pixel_softmax(align_to(g_r, g_s))
    if cfg.binding_variant == "jsd":
        return jensen_shannon(p, q)
    if cfg.binding_variant == "kld":
        return symmetric_kl(p, q)
    p2 = map_s.shape[0] * map_s.shape[1]
    return overlap(p, q) / p2


def validate_prompt(prompt: PromptSpec, n_tokens: int) -> None:
    """Check the prompt defines a usable objective over n_tokens maps."""
    if not prompt.object_indices:
        raise ObjectiveError("objective undefined: prompt has no object tokens")
    for s in prompt.object_indices:
        if s >= n_tokens:
            raise ObjectiveError(f"object index {s} outside the {n_tokens}-token attention map")
    for s, r in prompt.modifier_pairs:
        if r >= n_tokens:
            raise ObjectiveError(f"modifier index {r} outside the {n_tokens}-token attention map")


def _check_prompt(maps: np.ndarray, prompt: PromptSpec) -> None:
    if maps.ndim != 3:
        raise ObjectiveError(f"attention tensor must be P x P x N, got shape {maps.shape}")
    validate_prompt(prompt, maps.shape[2])


def total_loss(maps: np.ndarray, prompt: PromptSpec, cfg: ObjectiveConfig) -> LossBreakdown:
    """Unified loss over a P x P x N attention tensor."""
    maps = np.asarray(maps, dtype=np.float64)
    _check_prompt(maps, prompt)

    per_object: dict[int, float] = {}
    for s in prompt.object_indices:
        per_object[s] = presence_loss(maps[:, :, s], cfg)

    if cfg.presence_variant == "none":
        presence = 0.0
    elif cfg.presence_variant == "max_only":
        presence = _first_max(list(per_object.values()))
    else:
        presence = _mean(list(per_object.values()))

    per_pair: dict[tuple[int, int], float] = {}
    for s, r in prompt.modifier_pairs:
        if cfg.binding_variant != "none":
            per_pair[(s, r)] = binding_loss(maps[:, :, s], maps[:, :, r], cfg)

    binding = _mean(list(per_pair.values())) if per_pair else 0.0
    if cfg.divergence_binding:
        total = presence + cfg.lam * binding
    else:
        total = presence - cfg.lam * binding
    return LossBreakdown(total, presence, binding, per_object, per_pair)


def _mean(values: list[float]) -> float:
    acc = values[0]
    for v in values[1:]:
        acc = acc + v
    return acc / len(values)


def _first_max(values: list[float]) -> float:
    best = values[0]
    for v in values[1:]:
        if v > best:
            best = v
    return best


def attention_diagnostics(
    maps: np.ndarray, prompt: PromptSpec, kernel: GaussianKernel
) -> dict:
    """Per-object peak activations and per-pair overlaps for reporting.

    These are in-model proxies (peaks of smoothed maps, raw overlap sums),
    not external perceptual metrics.
    """
    maps = np.asarray(maps, dtype=np.float64)
    presence = {}
    for s in prompt.object_indices:
        presence[s] = grid_max(smooth(maps[:, :, s], kernel))
    binding = {}
    for s, r in prompt.modifier_pairs:
        g_s = smooth(maps[:, :, s], kernel)
        g_r = smooth(maps[:, :, r], kernel)
        binding[(s, r)] = overlap(pixel_softmax(g_s), pixel_softmax(align_to(g_r, g_s)))
    return {"presence": presence, "binding": binding}
