"""A deterministic, differentiable stand-in for a latent diffusion backend.

The toy denoiser exposes the same surface a real backend would need to plug
into the generation loop:

    forward(z, t, emb) -> (predicted_noise, attention)   # one evaluation
    step(z, t, noise) -> z_next                          # scheduler update

plus ``queries``/``key_weights``/``attn_scale`` so the weighting engine can
differentiate the attention map with respect to the text embedding. All
projection maps are fixed at construction from a seed; there is no training
and no platform-dependent state (token vectors come from a keyed hash, and
weights from PCG64 streams).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from hashlib import blake2b
from typing import Protocol, runtime_checkable

import numpy as np

from .autodiff import row_softmax
from .prompts import EmbeddingPair, PromptSpec


@runtime_checkable
class DenoiserBackend(Protocol):
    """What the generation loop requires from any backend.

    The adaptive-weighting engine additionally needs ``queries``,
    ``key_weights`` and ``attn_scale`` so it can differentiate the attention
    map with respect to the text embedding; a backend without those can still
    drive the vanilla and static-weighting paths.
    """

    latent_size: int
    channels: int

    def forward(self, z: np.ndarray, t: int, emb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Predicted noise and the P x P x N attention map."""

    def step(self, z: np.ndarray, t: int, noise: np.ndarray) -> np.ndarray:
        """Advance the latent one jump toward clean."""

    def decode(self, z0: np.ndarray) -> np.ndarray:
        """Map the final latent to an RGB image in [0, 1]."""

    def sample_latents(self, seed: int, batch: int) -> np.ndarray:
        """Seeded starting latents, shape (batch, P, P, C)."""


def _hash_floats(key: str, count: int) -> np.ndarray:
    """``count`` floats in [-1, 1), stable across runs and platforms."""
    out = np.empty(count, dtype=np.float64)
    done = 0
    block = 0
    while done < count:
        take = min(8, count - done)
        digest = blake2b(f"{key}#{block}".encode("utf-8"), digest_size=8 * take).digest()
        ints = np.frombuffer(digest, dtype="<u8")
        out[done : done + take] = (ints >> np.uint64(11)) * 2.0**-53 * 2.0 - 1.0
        done += take
        block += 1
    return out


class ToyTextEncoder:
    """Seeded lookup table from token strings to H-dimensional vectors."""

    NULL_TOKEN = ""

    def __init__(self, seed: int = 0, embed_dim: int = 8):
        self.seed = seed
        self.embed_dim = embed_dim
        self._table: dict[str, np.ndarray] = {}
        self.null_row = self.token_vector(self.NULL_TOKEN)

    def token_vector(self, token: str) -> np.ndarray:
        vec = self._table.get(token)
        if vec is None:
            vec = _hash_floats(f"{self.seed}:{token}", self.embed_dim)
            vec.setflags(write=False)
            self._table[token] = vec
        return vec

    def encode(self, prompt: PromptSpec) -> EmbeddingPair:
        cond = np.stack([self.token_vector(tok) for tok in prompt.tokens])
        uncond = np.tile(self.null_row, (prompt.n_tokens, 1))
        return EmbeddingPair(cond, uncond)


def ddim_update(z: np.ndarray, noise: np.ndarray, a_t: float, a_prev: float) -> np.ndarray:
    """One deterministic denoising jump from retention a_t to a_prev."""
    z0_hat = (z - math.sqrt(1.0 - a_t) * noise) / math.sqrt(a_t)
    return math.sqrt(a_prev) * z0_hat + math.sqrt(1.0 - a_prev) * noise


@dataclass(frozen=True)
class Schedule:
    """Strictly decreasing signal-retention curve over ``steps`` jumps.

    ``alpha_bar[t]`` is indexed by jump t in [0, steps]; index 0 is the
    cleanest point (close to 1) and index ``steps`` the noisiest.
    """

    steps: int = 50
    alpha_bar: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.alpha_bar is None:
            ramp = np.linspace(0.9991, 0.02, self.steps + 1)
            object.__setattr__(self, "alpha_bar", ramp)
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.shape != (self.steps + 1,):
            raise ValueError(f"alpha_bar needs {self.steps + 1} entries, got {ab.shape}")
        if np.any(np.diff(ab) >= 0) or np.any(ab <= 0) or np.any(ab > 1):
            raise ValueError("alpha_bar must be strictly decreasing within (0, 1]")
        object.__setattr__(self, "alpha_bar", ab)

    def step(self, z: np.ndarray, t: int, noise: np.ndarray) -> np.ndarray:
        """Deterministic update: reconstruct the clean estimate, re-noise at t-1."""
        if not 1 <= t <= self.steps:
            raise ValueError(f"step index {t} outside [1, {self.steps}]")
        if z.shape != noise.shape:
            raise ValueError(f"latent/noise shape mismatch: {z.shape} vs {noise.shape}")
        return ddim_update(z, noise, self.alpha_bar[t], self.alpha_bar[t - 1])


@dataclass
class DenoiserState:
    """Latent, current jump index, and the running evaluation counter."""

    z: np.ndarray
    t: int
    call_count: int = 0

    def count_call(self, n: int = 1) -> None:
        self.call_count += n


def cfg_noise(cond: np.ndarray, uncond: np.ndarray, beta: float) -> np.ndarray:
    """Guidance blend beta*cond + (1-beta)*uncond."""
    if cond.shape != uncond.shape:
        raise ValueError(f"shape mismatch: {cond.shape} vs {uncond.shape}")
    return beta * cond + (1.0 - beta) * uncond


class ToyDenoiser:
    """Single cross-attention site over a P x P x C latent grid.

    Queries come from latent cells (plus a seeded sinusoidal time bias), keys
    and values from the token embeddings. The predicted noise is a linear
    read-out of the attention output plus a seeded per-channel time term, so
    it is bounded regardless of the latent magnitude.
    """

    def __init__(
        self,
        seed: int = 0,
        latent_size: int = 16,
        channels: int = 4,
        head_dim: int = 8,
        embed_dim: int = 8,
        schedule: Schedule | None = None,
    ):
        self.seed = seed
        self.latent_size = latent_size
        self.channels = channels
        self.head_dim = head_dim
        self.embed_dim = embed_dim
        self.schedule = schedule if schedule is not None else Schedule()
        self.attn_scale = math.sqrt(head_dim)

        rng = np.random.Generator(np.random.PCG64(seed))
        c, d, h = channels, head_dim, embed_dim
        self.w_query = rng.standard_normal((c, d)) / math.sqrt(c)
        self.key_weights = rng.standard_normal((h, d)) / math.sqrt(h)
        self.w_value = rng.standard_normal((h, d)) / math.sqrt(h)
        self.w_out = rng.standard_normal((d, c)) / math.sqrt(d)
        self.q_time_amp = rng.uniform(0.1, 0.5, d)
        self.q_time_freq = rng.uniform(0.05, 0.3, d)
        self.q_time_phase = rng.uniform(0.0, 2.0 * math.pi, d)
        self.n_time_amp = rng.uniform(0.1, 0.5, c)
        self.n_time_freq = rng.uniform(0.05, 0.3, c)
        self.n_time_phase = rng.uniform(0.0, 2.0 * math.pi, c)
        self.w_decode = rng.standard_normal((c, 3)) / math.sqrt(c)
        self.b_decode = rng.uniform(0.2, 0.8, 3)
        for arr in (self.w_query, self.key_weights, self.w_value, self.w_out, self.w_decode):
            arr.setflags(write=False)

    # -- pieces shared with the differentiable path --------------------------

    def queries(self, z: np.ndarray, t: int) -> np.ndarray:
        """(P*P, d) query matrix for a latent at jump t."""
        self._check_latent(z)
        flat = z.reshape(-1, self.channels)
        bias = self.q_time_amp * np.sin(self.q_time_freq * t + self.q_time_phase)
        return flat @ self.w_query + bias

    def keys(self, emb: np.ndarray) -> np.ndarray:
        return emb @ self.key_weights

    # -- backend contract -----------------------------------------------------

    def forward(self, z: np.ndarray, t: int, emb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """One evaluation: predicted noise and the P x P x N attention map."""
        self._check_latent(z)
        emb = np.asarray(emb, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[1] != self.embed_dim:
            raise ValueError(f"embedding must be N x {self.embed_dim}, got {emb.shape}")
        q = self.queries(z, t)
        k = self.keys(emb)
        scores = (q @ k.T) / self.attn_scale
        attn = row_softmax(scores)
        feats = attn @ (emb @ self.w_value)
        tnoise = self.n_time_amp * np.sin(self.n_time_freq * t + self.n_time_phase)
        noise = (feats @ self.w_out).reshape(z.shape) + tnoise
        p = self.latent_size
        return noise, attn.reshape(p, p, emb.shape[0])

    def step(self, z: np.ndarray, t: int, noise: np.ndarray) -> np.ndarray:
        return self.schedule.step(z, t, noise)

    def decode(self, z0: np.ndarray) -> np.ndarray:
        """(P, P, 3) image in [0, 1] from the final latent."""
        self._check_latent(z0)
        return np.clip(z0 @ self.w_decode + self.b_decode, 0.0, 1.0)

    def sample_latents(self, seed: int, batch: int) -> np.ndarray:
        """Seeded unit-Gaussian starting latents, shape (batch, P, P, C)."""
        rng = np.random.Generator(np.random.PCG64(seed))
        return rng.standard_normal((batch, self.latent_size, self.latent_size, self.channels))

    def _check_latent(self, z: np.ndarray) -> None:
        p, c = self.latent_size, self.channels
        if z.shape != (p, p, c):
            raise ValueError(f"latent must have shape {(p, p, c)}, got {z.shape}")
