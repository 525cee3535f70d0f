"""Prompt representation: tokens, object/modifier structure, and weighting.

Prompts are whitespace-tokenized with ``<sot>`` prepended, ``<eot>`` appended,
and ``<pad>`` filling out to a fixed length. Object and modifier positions are
declared explicitly, either through inline markup or through the template
grammars; no statistical parser is involved, so positions are auditable.
"""

from __future__ import annotations

import itertools
import json
import re
from dataclasses import dataclass, field

import numpy as np

SOT = "<sot>"
EOT = "<eot>"
PAD = "<pad>"

DEFAULT_MAX_TOKENS = 16

_MARKUP = re.compile(r"\[(?P<kind>[mo])(?P<link>\d+):(?P<span>[^\]]+)\]")


class PromptError(ValueError):
    """Raised for malformed prompts, markup, or annotations."""


@dataclass(frozen=True)
class PromptSpec:
    """A tokenized prompt with its object/modifier annotation.

    ``object_indices`` (the set S) and ``modifier_pairs`` (object position,
    modifier position) refer to positions in ``tokens``, which includes the
    special tokens. ``frozen_mask`` is True at <sot>/<eot>/<pad> positions.
    """

    text: str
    tokens: tuple[str, ...]
    object_indices: tuple[int, ...]
    modifier_pairs: tuple[tuple[int, int], ...]
    frozen_mask: tuple[bool, ...]

    def __post_init__(self):
        n = len(self.tokens)
        for s in self.object_indices:
            if not 0 <= s < n:
                raise PromptError(f"object index {s} out of range for {n} tokens")
            if self.frozen_mask[s]:
                raise PromptError(f"object marked on frozen token at position {s}")
        objs = set(self.object_indices)
        for s, r in self.modifier_pairs:
            if s not in objs:
                raise PromptError(f"modifier pair ({s},{r}) references a non-object position")
            if not 0 <= r < n or self.frozen_mask[r]:
                raise PromptError(f"modifier position {r} invalid or frozen")

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "tokens": list(self.tokens),
            "objects": list(self.object_indices),
            "pairs": [list(p) for p in self.modifier_pairs],
            "frozen": [i for i, f in enumerate(self.frozen_mask) if f],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PromptSpec":
        tokens = tuple(d["tokens"])
        frozen = [False] * len(tokens)
        for i in d["frozen"]:
            frozen[i] = True
        return cls(
            text=d["text"],
            tokens=tokens,
            object_indices=tuple(d["objects"]),
            modifier_pairs=tuple((int(s), int(r)) for s, r in d["pairs"]),
            frozen_mask=tuple(frozen),
        )


def tokenize(words: list[str], max_tokens: int = DEFAULT_MAX_TOKENS) -> tuple[list[str], list[bool]]:
    """Wrap a word list in special tokens and pad to ``max_tokens``."""
    if len(words) + 2 > max_tokens:
        raise PromptError(
            f"prompt needs {len(words) + 2} tokens but the budget is {max_tokens}"
        )
    tokens = [SOT, *words, EOT]
    frozen = [True] + [False] * len(words) + [True]
    while len(tokens) < max_tokens:
        tokens.append(PAD)
        frozen.append(True)
    return tokens, frozen


def parse_annotated(markup: str, max_tokens: int = DEFAULT_MAX_TOKENS) -> PromptSpec:
    """Build a PromptSpec from inline markup.

    Objects are marked ``[o1:crown]`` and modifiers ``[m1:pink]``; a modifier
    binds to the object sharing its link id. A marked span may contain several
    words, in which case the head (last) word carries the annotation.
    """
    words: list[str] = []
    objects: dict[int, int] = {}  # link id -> head position (word index)
    modifiers: list[tuple[int, int]] = []  # (link id, head position)
    cursor = 0
    for m in _MARKUP.finditer(markup):
        words.extend(markup[cursor : m.start()].split())
        span_words = m.group("span").split()
        if not span_words:
            raise PromptError(f"empty span in markup: {m.group(0)}")
        words.extend(span_words)
        head = len(words) - 1
        link = int(m.group("link"))
        if m.group("kind") == "o":
            if link in objects:
                raise PromptError(f"duplicate object link id o{link}")
            objects[link] = head
        else:
            modifiers.append((link, head))
        cursor = m.end()
    words.extend(markup[cursor:].split())

    if not objects:
        raise PromptError("markup defines no object tokens")
    for link, _ in modifiers:
        if link not in objects:
            raise PromptError(f"modifier m{link} has no matching object o{link}")

    tokens, frozen = tokenize(words, max_tokens)
    offset = 1  # words start after <sot>
    object_indices = tuple(sorted(pos + offset for pos in objects.values()))
    pairs = tuple(sorted((objects[link] + offset, pos + offset) for link, pos in modifiers))
    text = " ".join(words)
    return PromptSpec(text, tuple(tokens), object_indices, pairs, tuple(frozen))


def _spec_from_slots(
    words: list[str],
    object_words: list[int],
    pair_words: list[tuple[int, int]],
    max_tokens: int,
) -> PromptSpec:
    tokens, frozen = tokenize(words, max_tokens)
    objs = tuple(sorted(i + 1 for i in object_words))
    pairs = tuple(sorted((s + 1, r + 1) for s, r in pair_words))
    return PromptSpec(" ".join(words), tuple(tokens), objs, pairs, tuple(frozen))


def _pairs_of(items: list[str]):
    return itertools.combinations(items, 2)


def _phrase_words(phrase: str) -> list[str]:
    return phrase.split()


def _with_scene(words: list[str], objects: list[int], scene: str):
    scene_words = _phrase_words(scene)
    base = len(words)
    words = words + scene_words
    objects = objects + [base + len(scene_words) - 1]  # scene head joins S
    return words, objects


TEMPLATE_IDS = (
    "animal-animal",
    "color-object",
    "animal-object",
    "animal-scene",
    "color-object-scene",
    "multi-object",
)

TEMPLATE_SLOTS = {
    "animal-animal": ("animals",),
    "color-object": ("colors", "objects"),
    "animal-object": ("animals", "colors", "objects"),
    "animal-scene": ("animals", "scenes"),
    "color-object-scene": ("colors", "objects", "scenes"),
    "multi-object": ("counts", "objects"),
}


def template_count(template_id: str, vocabulary: dict[str, list[str]]) -> int:
    """Closed-form size of a template expansion, for cross-checking."""
    v = {k: len(vocabulary.get(k, [])) for k in ("animals", "colors", "objects", "scenes", "counts")}
    na, nc, no, ns, nk = v["animals"], v["colors"], v["objects"], v["scenes"], v["counts"]
    if template_id == "animal-animal":
        return na * (na - 1) // 2
    if template_id == "color-object":
        return nc * nc * (no * (no - 1) // 2)
    if template_id == "animal-object":
        return na * nc * no
    if template_id == "animal-scene":
        return na * (na - 1) // 2 * ns
    if template_id == "color-object-scene":
        return nc * nc * (no * (no - 1) // 2) * ns
    if template_id == "multi-object":
        return nk * nk * (no * (no - 1) // 2)
    raise PromptError(f"unknown template {template_id!r}")


def expand_template(
    template_id: str,
    vocabulary: dict[str, list[str]],
    seed: int = 0,
    max_tokens: int = DEFAULT_MAX_TOKENS,
) -> list[PromptSpec]:
    """Expand a template over a vocabulary, deterministically.

    The full slot product is enumerated in vocabulary order and then shuffled
    by ``seed``; the same seed and vocabulary always give the same list.
    """
    if template_id not in TEMPLATE_IDS:
        raise PromptError(f"unknown template {template_id!r}")
    for slot in TEMPLATE_SLOTS[template_id]:
        if not vocabulary.get(slot):
            raise PromptError(f"template {template_id!r} needs non-empty slot {slot!r}")

    specs: list[PromptSpec] = []

    def emit(words, objects, pairs=()):
        specs.append(_spec_from_slots(words, objects, list(pairs), max_tokens))

    if template_id == "animal-animal":
        for a, b in _pairs_of(vocabulary["animals"]):
            emit(["a", a, "and", "a", b], [1, 4])
    elif template_id == "color-object":
        for ca, cb in itertools.product(vocabulary["colors"], repeat=2):
            for oa, ob in _pairs_of(vocabulary["objects"]):
                words = ["a", ca, oa, "and", "a", cb, ob]
                emit(words, [2, 6], [(2, 1), (6, 5)])
    elif template_id == "animal-object":
        for a in vocabulary["animals"]:
            for c in vocabulary["colors"]:
                for o in vocabulary["objects"]:
                    words = ["a", a, "and", "a", c, o]
                    emit(words, [1, 5], [(5, 4)])
    elif template_id == "animal-scene":
        for a, b in _pairs_of(vocabulary["animals"]):
            for scene in vocabulary["scenes"]:
                words, objects = _with_scene(["a", a, "and", "a", b], [1, 4], scene)
                emit(words, objects)
    elif template_id == "color-object-scene":
        for ca, cb in itertools.product(vocabulary["colors"], repeat=2):
            for oa, ob in _pairs_of(vocabulary["objects"]):
                for scene in vocabulary["scenes"]:
                    words, objects = _with_scene(
                        ["a", ca, oa, "and", "a", cb, ob], [2, 6], scene
                    )
                    emit(words, objects, [(2, 1), (6, 5)])
    elif template_id == "multi-object":
        for ka, kb in itertools.product(vocabulary["counts"], repeat=2):
            for oa, ob in _pairs_of(vocabulary["objects"]):
                words = [ka, oa, "and", kb, ob]
                emit(words, [1, 4])

    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(specs))
    return [specs[i] for i in order]


def load_vocabulary(path) -> dict[str, list[str]]:
    with open(path, encoding="utf-8") as fh:
        vocab = json.load(fh)
    if not isinstance(vocab, dict) or not all(
        isinstance(v, list) and all(isinstance(w, str) for w in v) for v in vocab.values()
    ):
        raise PromptError(f"vocabulary file {path} must map slot names to word lists")
    return vocab


@dataclass
class TokenWeights:
    """Learnable per-token weight parameters and their sigmoid bounding."""

    alpha: np.ndarray
    phi_lb: float = 0.6
    phi_ub: float = 1.4

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if not self.phi_lb < self.phi_ub:
            raise ValueError(f"need phi_lb < phi_ub, got [{self.phi_lb}, {self.phi_ub}]")

    @classmethod
    def trivial(cls, n_tokens: int, phi_lb: float = 0.6, phi_ub: float = 1.4) -> "TokenWeights":
        return cls(np.zeros(n_tokens), phi_lb, phi_ub)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def weights_from_alpha(weights: TokenWeights, frozen_mask) -> np.ndarray:
    """Bounded per-token coefficients lb + (ub - lb) * sigmoid(alpha), with
    frozen positions pinned to exactly 1."""
    phi = weights.phi_lb + (weights.phi_ub - weights.phi_lb) * sigmoid(weights.alpha)
    phi = np.where(np.asarray(frozen_mask, dtype=bool), 1.0, phi)
    return phi


@dataclass(frozen=True)
class EmbeddingPair:
    """Conditional and unconditional token embeddings, both N x H."""

    conditional: np.ndarray
    unconditional: np.ndarray

    def __post_init__(self):
        c, u = self.conditional, self.unconditional
        if c.shape != u.shape or c.ndim != 2:
            raise ValueError(f"embedding shapes differ: {c.shape} vs {u.shape}")


def weighted_embedding(pair: EmbeddingPair, phi: np.ndarray) -> np.ndarray:
    """Per-token interpolation phi*cond + (1-phi)*uncond."""
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (pair.conditional.shape[0],):
        raise ValueError(
            f"phi has {phi.shape} entries for {pair.conditional.shape[0]} tokens"
        )
    col = phi[:, None]
    return col * pair.conditional + (1.0 - col) * pair.unconditional
