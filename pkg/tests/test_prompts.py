import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frap.prompts import (
    EOT,
    PAD,
    SOT,
    EmbeddingPair,
    PromptError,
    PromptSpec,
    TokenWeights,
    expand_template,
    parse_annotated,
    template_count,
    weighted_embedding,
    weights_from_alpha,
)

VOCAB = {
    "animals": ["dog", "cat", "frog"],
    "colors": ["red", "green"],
    "objects": ["apple", "chair", "crown"],
    "scenes": ["in the kitchen", "on the bridge"],
    "counts": ["two", "three"],
}


class TestParseAnnotated:
    def test_two_colored_objects(self):
        spec = parse_annotated("a [m1:pink] [o1:crown] and a [m2:green] [o2:apple]")
        assert spec.text == "a pink crown and a green apple"
        assert spec.tokens[0] == SOT and spec.tokens[8] == EOT
        crown = spec.tokens.index("crown")
        apple = spec.tokens.index("apple")
        pink = spec.tokens.index("pink")
        green = spec.tokens.index("green")
        assert set(spec.object_indices) == {crown, apple}
        assert set(spec.modifier_pairs) == {(crown, pink), (apple, green)}

    def test_zero_objects_rejected(self):
        with pytest.raises(PromptError):
            parse_annotated("a plain sentence with no markup")

    def test_object_without_modifiers_is_valid(self):
        spec = parse_annotated("a [o1:dog] runs")
        assert spec.modifier_pairs == ()
        assert len(spec.object_indices) == 1

    def test_dangling_modifier_rejected(self):
        with pytest.raises(PromptError):
            parse_annotated("a [m3:red] [o1:chair]")

    def test_multiword_span_uses_head_token(self):
        spec = parse_annotated("a [o1:polar bear] sleeps")
        head = spec.object_indices[0]
        assert spec.tokens[head] == "bear"

    def test_padding_and_frozen_mask(self):
        spec = parse_annotated("a [o1:dog]", max_tokens=8)
        assert spec.tokens.count(PAD) == 8 - 4
        for i, tok in enumerate(spec.tokens):
            assert spec.frozen_mask[i] == (tok in (SOT, EOT, PAD))

    def test_too_long_rejected(self):
        with pytest.raises(PromptError):
            parse_annotated("[o1:a] " + "word " * 20)

    def test_round_trips_through_serialization(self):
        spec = parse_annotated("a [m1:pink] [o1:crown] and a [m2:green] [o2:apple]")
        assert PromptSpec.from_dict(spec.to_dict()) == spec


class TestTemplates:
    def test_color_object_single_color(self):
        specs = expand_template("color-object", {"colors": ["red"], "objects": ["apple", "chair"]})
        assert len(specs) == 1
        (spec,) = specs
        assert spec.text == "a red apple and a red chair"
        apple = spec.tokens.index("apple")
        chair = spec.tokens.index("chair")
        red1 = spec.tokens.index("red")
        red2 = spec.tokens.index("red", red1 + 1)
        assert set(spec.object_indices) == {apple, chair}
        assert set(spec.modifier_pairs) == {(apple, red1), (chair, red2)}

    def test_animal_animal_single_pair(self):
        specs = expand_template("animal-animal", {"animals": ["dog", "cat"]})
        assert len(specs) == 1
        assert specs[0].text == "a dog and a cat"
        assert specs[0].modifier_pairs == ()
        assert len(specs[0].object_indices) == 2

    def test_scene_head_joins_objects(self):
        specs = expand_template(
            "animal-scene", {"animals": ["dog", "cat"], "scenes": ["in the kitchen"]}
        )
        (spec,) = specs
        kitchen = spec.tokens.index("kitchen")
        assert kitchen in spec.object_indices
        assert len(spec.object_indices) == 3

    @pytest.mark.parametrize(
        "template_id",
        [
            "animal-animal",
            "color-object",
            "animal-object",
            "animal-scene",
            "color-object-scene",
            "multi-object",
        ],
    )
    def test_counts_match_closed_form(self, template_id):
        specs = expand_template(template_id, VOCAB, seed=5)
        assert len(specs) == template_count(template_id, VOCAB)

    def test_same_seed_same_list(self):
        a = expand_template("color-object", VOCAB, seed=42)
        b = expand_template("color-object", VOCAB, seed=42)
        assert a == b
        c = expand_template("color-object", VOCAB, seed=43)
        assert set(s.text for s in a) == set(s.text for s in c)

    def test_unknown_template_rejected(self):
        with pytest.raises(PromptError):
            expand_template("color-color", VOCAB)


class TestTokenWeights:
    def test_alpha_zero_gives_one(self):
        w = TokenWeights.trivial(4)
        phi = weights_from_alpha(w, [True, False, False, True])
        assert np.all(phi == 1.0)

    def test_sigmoid_limits(self):
        w = TokenWeights(np.array([-800.0, 800.0]))
        phi = weights_from_alpha(w, [False, False])
        assert abs(phi[0] - 0.6) < 1e-12
        assert abs(phi[1] - 1.4) < 1e-12

    def test_log3_closed_form(self):
        w = TokenWeights(np.array([math.log(3.0)]))
        phi = weights_from_alpha(w, [False])
        assert abs(phi[0] - 1.2) < 1e-12

    def test_frozen_reports_one_for_any_alpha(self):
        w = TokenWeights(np.array([3.7, -9.1]))
        phi = weights_from_alpha(w, [True, True])
        assert np.all(phi == 1.0)

    def test_invalid_bounds_rejected(self):
        with pytest.raises(ValueError):
            TokenWeights(np.zeros(2), phi_lb=1.4, phi_ub=0.6)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(min_value=-12, max_value=12), st.floats(min_value=1e-5, max_value=5))
    def test_strictly_monotone_and_bounded(self, a, delta):
        w1 = TokenWeights(np.array([a]))
        w2 = TokenWeights(np.array([a + delta]))
        p1 = weights_from_alpha(w1, [False])[0]
        p2 = weights_from_alpha(w2, [False])[0]
        assert p2 > p1
        assert 0.6 < p1 < 1.4


class TestWeightedEmbedding:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.pair = EmbeddingPair(rng.standard_normal((5, 3)), rng.standard_normal((5, 3)))

    def test_phi_one_returns_conditional_exactly(self):
        out = weighted_embedding(self.pair, np.ones(5))
        assert np.array_equal(out, self.pair.conditional)

    def test_phi_zero_returns_unconditional_exactly(self):
        out = weighted_embedding(self.pair, np.zeros(5))
        assert np.array_equal(out, self.pair.unconditional)

    def test_midpoint(self):
        out = weighted_embedding(self.pair, np.full(5, 0.5))
        np.testing.assert_allclose(
            out, 0.5 * (self.pair.conditional + self.pair.unconditional), atol=1e-15
        )

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            weighted_embedding(self.pair, np.ones(4))

    @settings(max_examples=50, deadline=None)
    @given(st.floats(min_value=0, max_value=1))
    def test_linear_in_phi(self, a):
        rng = np.random.default_rng(1)
        phi1 = rng.uniform(0.6, 1.4, 5)
        phi2 = rng.uniform(0.6, 1.4, 5)
        mixed = weighted_embedding(self.pair, a * phi1 + (1 - a) * phi2)
        combo = a * weighted_embedding(self.pair, phi1) + (1 - a) * weighted_embedding(
            self.pair, phi2
        )
        np.testing.assert_allclose(mixed, combo, atol=1e-12)
