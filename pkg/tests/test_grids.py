import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frap.grids import (
    GaussianKernel,
    ShapeError,
    align_to,
    argmax_cell,
    grid_max,
    pixel_softmax,
    reflect_index,
    smooth,
    smooth_adjoint,
)


def brute_force_smooth(grid: np.ndarray, kernel: GaussianKernel) -> np.ndarray:
    """Independent oracle: full 2-D convolution over a reflect-padded copy."""
    h = kernel.half
    w2d = np.outer(kernel.weights, kernel.weights)
    n = grid.shape[0]
    out = np.zeros_like(grid)
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for di in range(-h, h + 1):
                for dj in range(-h, h + 1):
                    src = grid[reflect_index(i + di, n), reflect_index(j + dj, n)]
                    acc += w2d[di + h, dj + h] * src
            out[i, j] = acc
    return out


def grids_strategy(n=4):
    return st.lists(
        st.floats(min_value=-10, max_value=10, allow_nan=False),
        min_size=n * n,
        max_size=n * n,
    ).map(lambda v: np.array(v).reshape(n, n))


class TestKernel:
    def test_default_taps_match_closed_form(self):
        k = GaussianKernel()
        w = math.exp(-2.0) / (1.0 + 2.0 * math.exp(-2.0))
        assert abs(k.weights[0] - w) < 1e-12
        assert abs(k.weights[2] - w) < 1e-12
        assert abs(k.weights[1] - (1.0 - 2.0 * w)) < 1e-12
        assert abs(k.weights[0] - 0.10650698) < 1e-7
        assert abs(k.weights[1] - 0.78698604) < 1e-7

    def test_taps_normalized_and_symmetric(self):
        for size, sigma in [(3, 0.5), (5, 1.0), (7, 2.0)]:
            k = GaussianKernel(size=size, sigma=sigma)
            assert abs(k.weights.sum() - 1.0) < 1e-12
            assert np.array_equal(k.weights, k.weights[::-1])

    def test_rejects_bad_parameters(self):
        with pytest.raises(ValueError):
            GaussianKernel(size=4)
        with pytest.raises(ValueError):
            GaussianKernel(sigma=0.0)


class TestSmooth:
    def test_matches_brute_force_convolution(self):
        rng = np.random.default_rng(7)
        k = GaussianKernel()
        for n in (4, 5, 16):
            g = rng.standard_normal((n, n))
            np.testing.assert_allclose(smooth(g, k), brute_force_smooth(g, k), atol=1e-12)

    def test_matches_brute_force_size5(self):
        rng = np.random.default_rng(8)
        k = GaussianKernel(size=5, sigma=1.0)
        g = rng.standard_normal((9, 9))
        np.testing.assert_allclose(smooth(g, k), brute_force_smooth(g, k), atol=1e-12)

    def test_constant_map_is_exactly_invariant(self):
        k = GaussianKernel()
        g = np.full((16, 16), 0.3172398471)
        assert np.array_equal(smooth(g, k), g)

    def test_interior_hot_pixel_conserves_mass(self):
        k = GaussianKernel()
        g = np.zeros((16, 16))
        g[8, 8] = 1.0
        assert abs(smooth(g, k).sum() - 1.0) < 1e-12

    def test_rejects_non_square(self):
        with pytest.raises(ShapeError):
            smooth(np.zeros((3, 4)), GaussianKernel())

    @settings(max_examples=50, deadline=None)
    @given(grids_strategy(n=6))
    def test_mass_conserved(self, g):
        # edge-repeating reflection redirects every tap back into the grid,
        # so total mass is conserved for any input, not just interior mass
        k = GaussianKernel()
        assert abs(smooth(g, k).sum() - g.sum()) < 1e-9

    @settings(max_examples=50, deadline=None)
    @given(grids_strategy(n=5))
    def test_smoothing_cannot_raise_the_max(self, g):
        g = np.abs(g)
        k = GaussianKernel()
        assert grid_max(smooth(g, k)) <= grid_max(g) + 1e-12

    def test_adjoint_is_transpose_of_forward(self):
        # <smooth(x), y> == <x, smooth_adjoint(y)> for the same linear map
        rng = np.random.default_rng(11)
        k = GaussianKernel()
        for _ in range(10):
            x = rng.standard_normal((6, 6))
            y = rng.standard_normal((6, 6))
            lhs = float((smooth(x, k) * y).sum())
            rhs = float((x * smooth_adjoint(y, k)).sum())
            assert abs(lhs - rhs) < 1e-12


class TestPixelSoftmax:
    def test_uniform_grid(self):
        p = pixel_softmax(np.full((4, 4), 2.5))
        assert np.all(p == 1.0 / 16.0)

    def test_closed_form_two_cells(self):
        p = pixel_softmax(np.array([[0.0, math.log(3.0)]]))
        np.testing.assert_allclose(p, [[0.25, 0.75]], atol=1e-15)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            pixel_softmax(np.array([[np.inf, 0.0]]))

    @settings(max_examples=50, deadline=None)
    @given(grids_strategy(n=4), st.floats(min_value=-5, max_value=5, allow_nan=False))
    def test_sums_to_one_and_shift_invariant(self, g, c):
        p = pixel_softmax(g)
        assert abs(p.sum() - 1.0) < 1e-9
        assert np.all(p >= 0)
        np.testing.assert_allclose(pixel_softmax(g + c), p, atol=1e-12)


class TestAlign:
    def test_shift_enumerated_by_hand(self):
        source = np.array([[9.0, 1.0], [2.0, 3.0]])  # argmax (0,0)
        target = np.array([[0.0, 0.0], [0.0, 5.0]])  # argmax (1,1)
        out = align_to(source, target)
        assert out[1, 1] == 9.0
        assert out[0, 0] == 0.0 and out[0, 1] == 0.0 and out[1, 0] == 0.0

    def test_identity_when_argmaxes_coincide(self):
        g = np.array([[1.0, 7.0], [3.0, 2.0]])
        t = np.array([[0.0, 9.0], [1.0, 1.0]])
        assert np.array_equal(align_to(g, t), g)

    def test_self_alignment_is_identity(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            g = rng.standard_normal((5, 5))
            assert np.array_equal(align_to(g, g), g)

    def test_tie_breaks_to_first_row_major_cell(self):
        g = np.array([[1.0, 1.0], [1.0, 1.0]])
        assert argmax_cell(g) == (0, 0)
        t = np.zeros((2, 2))
        t[0, 1] = 1.0
        out = align_to(g, t)
        # source argmax (0,0) moves to (0,1): column shifted right by one
        assert out[0, 0] == 0.0 and out[0, 1] == 1.0

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ShapeError):
            align_to(np.zeros((2, 2)), np.zeros((3, 3)))


class TestGridMax:
    def test_simple(self):
        assert grid_max(np.array([[0.1, 0.9], [0.3, 0.2]])) == 0.9

    def test_uniform(self):
        assert grid_max(np.full((3, 3), 0.125)) == 0.125

    def test_softmax_of_uniform_16x16(self):
        assert grid_max(pixel_softmax(np.full((16, 16), 1.0))) == 1.0 / 256.0

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            grid_max(np.zeros((0, 0)))
