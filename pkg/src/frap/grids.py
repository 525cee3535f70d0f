"""Dense 2-D grid arithmetic for attention maps.

All functions operate on square float64 grids ("P x P maps") and are pure:
no global state, safe to call concurrently. Smoothing is written in the
increment form ``x + sum_k w_k * (shift_k(x) - x)`` so an all-constant map
passes through bit-for-bit regardless of how the kernel weights round.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np


class ShapeError(ValueError):
    """Raised when a grid has the wrong shape for an operation."""


@dataclass(frozen=True)
class GaussianKernel:
    """Normalized 1-D Gaussian taps used separably along both grid axes.

    The center tap is defined as one minus the sum of the off-center taps,
    which pins the tap sum to 1 up to a single rounding step.
    """

    size: int = 3
    sigma: float = 0.5
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.size < 1 or self.size % 2 == 0:
            raise ValueError(f"kernel size must be odd and positive, got {self.size}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        half = self.size // 2
        xs = np.arange(-half, half + 1, dtype=np.float64)
        taps = np.exp(-(xs * xs) / (2.0 * self.sigma * self.sigma))
        taps = taps / taps.sum()
        if half > 0:
            taps[half] = 1.0 - 2.0 * float(taps[:half].sum())
        object.__setattr__(self, "weights", taps)

    @property
    def half(self) -> int:
        return self.size // 2


def _require_square(grid: np.ndarray, what: str = "grid") -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
        raise ShapeError(f"{what} must be square 2-D, got shape {grid.shape}")
    return grid


def reflect_index(i: int, n: int) -> int:
    """Mirror an out-of-range index back into [0, n).

    Edge-repeating reflection, ``(d c b a | a b c d | d c b a)``: the common
    image-filter default. Every column of the induced 1-D operator sums to 1,
    so smoothing conserves total mass for any input.
    """
    period = 2 * n
    i = i % period
    return i if i < n else period - 1 - i


@lru_cache(maxsize=256)
def _shift_indices(n: int, offset: int) -> np.ndarray:
    """Source index for each output position under a shift with reflect padding."""
    return np.array([reflect_index(i + offset, n) for i in range(n)], dtype=np.intp)


def _smooth_axis(grid: np.ndarray, kernel: GaussianKernel, axis: int) -> np.ndarray:
    out = grid.copy()
    n = grid.shape[axis]
    for k in range(kernel.size):
        offset = k - kernel.half
        if offset == 0:
            continue
        idx = _shift_indices(n, offset)
        shifted = np.take(grid, idx, axis=axis)
        out += kernel.weights[k] * (shifted - grid)
    return out


def _smooth_axis_adjoint(grad: np.ndarray, kernel: GaussianKernel, axis: int) -> np.ndarray:
    """Transpose of the linear map applied by ``_smooth_axis``."""
    out = grad.copy()
    n = grad.shape[axis]
    for k in range(kernel.size):
        offset = k - kernel.half
        if offset == 0:
            continue
        idx = _shift_indices(n, offset)
        scattered = np.zeros_like(grad)
        moved = np.moveaxis(scattered, axis, 0)
        np.add.at(moved, idx, np.moveaxis(grad, axis, 0))
        out += kernel.weights[k] * (scattered - grad)
    return out


def smooth(grid: np.ndarray, kernel: GaussianKernel) -> np.ndarray:
    """Separable Gaussian smoothing with reflect padding.

    Constant maps are returned unchanged, bit-for-bit: every off-center term
    is then ``w_k * 0`` and the center contributes the input itself.
    """
    grid = _require_square(grid)
    return _smooth_axis(_smooth_axis(grid, kernel, 0), kernel, 1)


def smooth_adjoint(grad: np.ndarray, kernel: GaussianKernel) -> np.ndarray:
    """Vector-Jacobian product of :func:`smooth` (it is linear in the grid)."""
    grad = _require_square(grad)
    return _smooth_axis_adjoint(_smooth_axis_adjoint(grad, kernel, 1), kernel, 0)


def pixel_softmax(grid: np.ndarray) -> np.ndarray:
    """Softmax over all cells, max-subtracted for stability. Sums to 1."""
    grid = np.asarray(grid, dtype=np.float64)
    if not np.all(np.isfinite(grid)):
        raise ValueError("pixel_softmax requires finite values")
    e = np.exp(grid - grid.max())
    return e / e.sum()


def pixel_softmax_vjp(prob: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Backward pass of :func:`pixel_softmax` given its output ``prob``."""
    inner = float((grad * prob).sum())
    return prob * (grad - inner)


def argmax_cell(grid: np.ndarray) -> tuple[int, int]:
    """Row-major first argmax cell; the deterministic tie-break everywhere."""
    flat = int(np.argmax(grid))
    return flat // grid.shape[1], flat % grid.shape[1]


def align_offsets(source: np.ndarray, target: np.ndarray) -> tuple[int, int]:
    sr, sc = argmax_cell(source)
    tr, tc = argmax_cell(target)
    return tr - sr, tc - sc


def shift_with_zero_fill(grid: np.ndarray, dr: int, dc: int) -> np.ndarray:
    """Translate a grid by (dr, dc); cells shifted in from outside are zero."""
    out = np.zeros_like(grid)
    n, m = grid.shape
    src_r = slice(max(0, -dr), min(n, n - dr))
    src_c = slice(max(0, -dc), min(m, m - dc))
    dst_r = slice(max(0, dr), min(n, n + dr))
    dst_c = slice(max(0, dc), min(m, m + dc))
    out[dst_r, dst_c] = grid[src_r, src_c]
    return out


def align_to(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Translate ``source`` so its argmax cell lands on ``target``'s argmax cell.

    Vacated cells are zero-filled. Argmax ties break to the first cell in
    row-major order, so the result is deterministic.
    """
    source = _require_square(source, "source")
    target = _require_square(target, "target")
    if source.shape != target.shape:
        raise ShapeError(f"shape mismatch: {source.shape} vs {target.shape}")
    dr, dc = align_offsets(source, target)
    if dr == 0 and dc == 0:
        return source.copy()
    return shift_with_zero_fill(source, dr, dc)


def grid_max(grid: np.ndarray) -> float:
    """Maximum cell value. The gradient convention routes entirely to the
    first row-major argmax cell (see the autodiff ops)."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ShapeError("grid_max of an empty grid")
    return float(grid.max())
