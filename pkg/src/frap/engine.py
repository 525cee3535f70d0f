"""Differentiation of the unified objective with respect to token weights.

The only differentiated path is the within-step one: weight parameters ->
bounded coefficients -> interpolated embedding -> keys -> attention softmax
-> objective. The latent and queries are constants inside a step, matching
how the generation loop consumes the gradient.

``loss_and_grad`` records the whole computation on a :class:`~frap.autodiff.Tape`
using the same elementary kernels as the plain evaluation path, so its loss
value equals ``objective.total_loss`` applied to the attention map from
``forward`` bit-for-bit; tests pin this equality.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Node, Tape
from .denoiser import ToyDenoiser, ToyTextEncoder
from .grids import align_offsets
from .objective import PROB_FLOOR, LossBreakdown, ObjectiveConfig, validate_prompt
from .prompts import (
    EmbeddingPair,
    PromptSpec,
    TokenWeights,
    parse_annotated,
    weighted_embedding,
    weights_from_alpha,
)


@dataclass
class GradResult:
    loss: LossBreakdown
    grad: np.ndarray
    phi: np.ndarray
    tape: Tape
    loss_node: Node


def _taped_presence(tape: Tape, g: Node, cfg: ObjectiveConfig, side: int) -> Node:
    if cfg.presence_variant == "total_variation":
        tv = tape.add(
            tape.sum_all(tape.abs(tape.axis_diff(g, 0))),
            tape.sum_all(tape.abs(tape.axis_diff(g, 1))),
        )
        denom = tape.scale(tape.grid_max(g), 2.0 * side * (side - 1))
        return tape.neg(tape.div(tv, denom))
    return tape.const_minus(1.0, tape.grid_max(g))


def _taped_divergence(tape: Tape, p: Node, q: Node, variant: str) -> Node:
    def kl(a: Node, b: Node) -> Node:
        af = tape.floor_at(a, PROB_FLOOR)
        bf = tape.floor_at(b, PROB_FLOOR)
        return tape.sum_all(tape.mul(af, tape.sub(tape.log(af), tape.log(bf))))

    if variant == "jsd":
        m = tape.div_const(tape.add(p, q), 2.0)
        return tape.div_const(tape.add(kl(p, m), kl(q, m)), 2.0)
    return tape.div_const(tape.add(kl(p, q), kl(q, p)), 2.0)


def _taped_mean(tape: Tape, nodes: list[Node]) -> Node:
    acc = nodes[0]
    for node in nodes[1:]:
        acc = tape.add(acc, node)
    return tape.div_const(acc, float(len(nodes)))


def taped_total_loss(
    tape: Tape, attn: Node, prompt: PromptSpec, cfg: ObjectiveConfig, side: int
) -> tuple[Node, LossBreakdown]:
    """Record the unified objective on the tape; ``attn`` is (P*P, N)."""
    smoothed: dict[int, Node] = {}

    def smooth_slice(token: int) -> Node:
        node = smoothed.get(token)
        if node is None:
            node = tape.smooth(tape.token_grid(attn, token, side), cfg.kernel)
            smoothed[token] = node
        return node

    per_object: dict[int, Node] = {
        s: _taped_presence(tape, smooth_slice(s), cfg, side)
        for s in prompt.object_indices
    }
    if cfg.presence_variant == "none":
        presence = tape.leaf(0.0)
    elif cfg.presence_variant == "max_only":
        presence = tape.reduce_max(list(per_object.values()))
    else:
        presence = _taped_mean(tape, list(per_object.values()))

    per_pair: dict[tuple[int, int], Node] = {}
    if cfg.binding_variant != "none":
        for s, r in prompt.modifier_pairs:
            g_s = smooth_slice(s)
            g_r = smooth_slice(r)
            dr, dc = align_offsets(g_r.value, g_s.value)
            p = tape.pixel_softmax(g_s)
            q = tape.pixel_softmax(tape.shift(g_r, dr, dc))
            if cfg.divergence_binding:
                per_pair[(s, r)] = _taped_divergence(tape, p, q, cfg.binding_variant)
            else:
                per_pair[(s, r)] = tape.div_const(
                    tape.sum_all(tape.minimum(p, q)), float(side * side)
                )

    binding = _taped_mean(tape, list(per_pair.values())) if per_pair else tape.leaf(0.0)
    scaled = tape.scale(binding, cfg.lam)
    total = tape.add(presence, scaled) if cfg.divergence_binding else tape.sub(presence, scaled)

    breakdown = LossBreakdown(
        total=float(total.value),
        presence=float(presence.value),
        binding=float(binding.value),
        per_object_presence={s: float(n.value) for s, n in per_object.items()},
        per_pair_binding={k: float(n.value) for k, n in per_pair.items()},
    )
    return total, breakdown


def loss_and_grad(
    denoiser: ToyDenoiser,
    z: np.ndarray,
    t: int,
    prompt: PromptSpec,
    emb: EmbeddingPair,
    weights: TokenWeights,
    cfg: ObjectiveConfig,
) -> GradResult:
    """Loss breakdown and d(loss)/d(alpha) for one step, latent held fixed."""
    validate_prompt(prompt, prompt.n_tokens)
    tape = Tape()
    alpha = tape.leaf(weights.alpha)
    bounded = tape.bounded(tape.sigmoid(alpha), weights.phi_lb, weights.phi_ub)
    phi = tape.freeze(bounded, np.asarray(prompt.frozen_mask, dtype=bool))
    emb_node = tape.interp_rows(phi, emb.conditional, emb.unconditional)
    keys = tape.matmul(emb_node, denoiser.key_weights)
    scores = tape.attn_scores(keys, denoiser.queries(z, t), denoiser.attn_scale)
    attn = tape.row_softmax(scores)
    total, breakdown = taped_total_loss(tape, attn, prompt, cfg, denoiser.latent_size)
    tape.backward(total)
    grad = alpha.grad if alpha.grad is not None else np.zeros_like(weights.alpha)
    return GradResult(breakdown, np.asarray(grad, dtype=np.float64), phi.value, tape, total)


def plain_loss(
    denoiser: ToyDenoiser,
    z: np.ndarray,
    t: int,
    prompt: PromptSpec,
    emb: EmbeddingPair,
    alpha: np.ndarray,
    weights: TokenWeights,
    cfg: ObjectiveConfig,
) -> float:
    """Tape-free evaluation of the same loss; the finite-difference oracle path."""
    from .objective import total_loss

    shifted = TokenWeights(alpha, weights.phi_lb, weights.phi_ub)
    phi = weights_from_alpha(shifted, prompt.frozen_mask)
    mixed = weighted_embedding(emb, phi)
    _, attn = denoiser.forward(z, t, mixed)
    return total_loss(attn, prompt, cfg).total


@dataclass
class GradCheckTrial:
    seed: int
    t: int
    n_tokens: int
    abs_err: float
    rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    trials: list[GradCheckTrial]
    h: float
    tol: float
    max_abs_err: float = field(init=False)
    max_rel_err: float = field(init=False)
    n_passed: int = field(init=False)
    passed: bool = field(init=False)

    def __post_init__(self):
        self.max_abs_err = max((t.abs_err for t in self.trials), default=0.0)
        self.max_rel_err = max((t.rel_err for t in self.trials), default=0.0)
        self.n_passed = sum(t.passed for t in self.trials)
        self.passed = self.n_passed == len(self.trials)

    def to_dict(self) -> dict:
        return {
            "h": self.h,
            "tol": self.tol,
            "trials": len(self.trials),
            "n_passed": self.n_passed,
            "max_abs_err": self.max_abs_err,
            "max_rel_err": self.max_rel_err,
            "passed": self.passed,
        }


_CHECK_OBJECTS = ("cat", "dog", "car", "tree", "apple", "chair", "bird", "boat")
_CHECK_MODIFIERS = ("red", "green", "blue", "shiny")


def _random_prompt(rng: np.random.Generator) -> PromptSpec:
    n_objects = int(rng.integers(1, 4))
    chosen = rng.choice(len(_CHECK_OBJECTS), size=n_objects, replace=False)
    parts = []
    for i, obj_idx in enumerate(chosen, start=1):
        obj = _CHECK_OBJECTS[obj_idx]
        if rng.random() < 0.6:
            mod = _CHECK_MODIFIERS[int(rng.integers(0, len(_CHECK_MODIFIERS)))]
            parts.append(f"a [m{i}:{mod}] [o{i}:{obj}]")
        else:
            parts.append(f"a [o{i}:{obj}]")
    return parse_annotated(" and ".join(parts))


def finite_difference_grad(
    denoiser, z, t, prompt, emb, weights, cfg, h: float
) -> np.ndarray:
    """Central differences of the plain loss, one coordinate at a time."""
    grad = np.zeros_like(weights.alpha)
    for i in range(weights.alpha.size):
        up = weights.alpha.copy()
        down = weights.alpha.copy()
        up[i] += h
        down[i] -= h
        l_up = plain_loss(denoiser, z, t, prompt, emb, up, weights, cfg)
        l_down = plain_loss(denoiser, z, t, prompt, emb, down, weights, cfg)
        grad[i] = (l_up - l_down) / (2.0 * h)
    return grad


def grad_check(
    trials: int = 100,
    h: float = 1e-4,
    tol: float = 1e-4,
    seed: int = 0,
    denoiser: ToyDenoiser | None = None,
    encoder: ToyTextEncoder | None = None,
    cfg: ObjectiveConfig | None = None,
) -> GradCheckReport:
    """Compare analytic and central-difference gradients on seeded trials."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    denoiser = denoiser if denoiser is not None else ToyDenoiser(seed=1234)
    encoder = encoder if encoder is not None else ToyTextEncoder(seed=1234)
    cfg = cfg if cfg is not None else ObjectiveConfig()

    results = []
    for i in range(trials):
        trial_seed = seed + i
        rng = np.random.Generator(np.random.PCG64(trial_seed))
        prompt = _random_prompt(rng)
        emb = encoder.encode(prompt)
        z = rng.standard_normal(
            (denoiser.latent_size, denoiser.latent_size, denoiser.channels)
        )
        t = int(rng.integers(1, denoiser.schedule.steps + 1))
        weights = TokenWeights(rng.uniform(-3.0, 3.0, prompt.n_tokens))

        analytic = loss_and_grad(denoiser, z, t, prompt, emb, weights, cfg).grad
        numeric = finite_difference_grad(denoiser, z, t, prompt, emb, weights, cfg, h)
        abs_err = float(np.max(np.abs(analytic - numeric)))
        scale = max(float(np.max(np.abs(numeric))), 1e-12)
        rel_err = abs_err / scale
        results.append(
            GradCheckTrial(trial_seed, t, prompt.n_tokens, abs_err, rel_err, rel_err <= tol)
        )
    return GradCheckReport(results, h, tol)
