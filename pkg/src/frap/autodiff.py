"""Reverse-mode differentiation on an explicit tape.

A :class:`Tape` records elementary operations as they execute; each entry
keeps the output node, its parents, a forward callable (so the tape can be
replayed bit-for-bit) and a vector-Jacobian callable. The op set is exactly
what the weighting objective needs: embedding interpolation, attention
softmax, Gaussian smoothing, pixel softmax, element-wise min, max reductions,
and scalar arithmetic.

Subgradient conventions are deterministic: ``grid_max`` routes its adjoint to
the first row-major argmax cell, element-wise ``minimum`` routes ties to its
first argument, and scalar ``reduce_max`` routes to the first maximal input.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import grids
from .grids import GaussianKernel


class Node:
    """A value in the recorded computation; ``grad`` is filled by backward()."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None


class _Entry:
    __slots__ = ("out", "parents", "forward", "vjp")

    def __init__(self, out, parents, forward, vjp):
        self.out = out
        self.parents = parents
        self.forward = forward
        self.vjp = vjp


class Tape:
    """Records ops from the leaves to a scalar loss; replays and backpropagates."""

    def __init__(self):
        self._entries: list[_Entry] = []

    def __len__(self) -> int:
        return len(self._entries)

    # -- construction ------------------------------------------------------

    def leaf(self, value) -> Node:
        return Node(value)

    def _push(
        self,
        parents: Sequence[Node],
        forward: Callable,
        vjp: Callable,
    ) -> Node:
        out = Node(forward(*(p.value for p in parents)))
        self._entries.append(_Entry(out, tuple(parents), forward, vjp))
        return out

    # -- elementwise / scalar ops ------------------------------------------

    def sigmoid(self, x: Node) -> Node:
        from .prompts import sigmoid  # shared with the plain weighting path

        def vjp(g, out, _x):
            return (g * out * (1.0 - out),)

        return self._push([x], sigmoid, vjp)

    def bounded(self, s: Node, lb: float, ub: float) -> Node:
        span = ub - lb
        return self._push(
            [s],
            lambda v: lb + span * v,
            lambda g, out, v: (g * span,),
        )

    def freeze(self, x: Node, mask: np.ndarray) -> Node:
        keep = ~np.asarray(mask, dtype=bool)
        return self._push(
            [x],
            lambda v: np.where(~keep, 1.0, v),
            lambda g, out, v: (g * keep,),
        )

    def add(self, a: Node, b: Node) -> Node:
        return self._push([a, b], lambda x, y: x + y, lambda g, out, x, y: (g, g))

    def sub(self, a: Node, b: Node) -> Node:
        return self._push([a, b], lambda x, y: x - y, lambda g, out, x, y: (g, -g))

    def mul(self, a: Node, b: Node) -> Node:
        return self._push(
            [a, b], lambda x, y: x * y, lambda g, out, x, y: (g * y, g * x)
        )

    def scale(self, x: Node, c: float) -> Node:
        return self._push([x], lambda v: v * c, lambda g, out, v: (g * c,))

    def div_const(self, x: Node, c: float) -> Node:
        return self._push([x], lambda v: v / c, lambda g, out, v: (g / c,))

    def const_minus(self, c: float, x: Node) -> Node:
        return self._push([x], lambda v: c - v, lambda g, out, v: (-g,))

    def neg(self, x: Node) -> Node:
        return self._push([x], lambda v: -v, lambda g, out, v: (-g,))

    def div(self, a: Node, b: Node) -> Node:
        return self._push(
            [a, b],
            lambda x, y: x / y,
            lambda g, out, x, y: (g / y, -g * x / (y * y)),
        )

    def log(self, x: Node) -> Node:
        return self._push([x], np.log, lambda g, out, v: (g / v,))

    def abs(self, x: Node) -> Node:
        return self._push([x], np.abs, lambda g, out, v: (g * np.sign(v),))

    def floor_at(self, x: Node, eps: float) -> Node:
        """max(x, eps); the adjoint passes only where x is above the floor."""
        return self._push(
            [x],
            lambda v: np.maximum(v, eps),
            lambda g, out, v: (g * (v >= eps),),
        )

    def minimum(self, a: Node, b: Node) -> Node:
        def vjp(g, out, x, y):
            first = x <= y  # ties route to the first argument
            return (g * first, g * ~first)

        return self._push([a, b], np.minimum, vjp)

    def sum_all(self, x: Node) -> Node:
        def vjp(g, out, v):
            return (np.full_like(v, float(g)),)

        return self._push([x], lambda v: np.asarray(v.sum()), vjp)

    def axis_diff(self, x: Node, axis: int) -> Node:
        def vjp(g, out, v):
            gx = np.zeros_like(v)
            lead = (slice(None),) * axis
            gx[lead + (slice(1, None),)] += g
            gx[lead + (slice(None, -1),)] -= g
            return (gx,)

        return self._push([x], lambda v: np.diff(v, axis=axis), vjp)

    def reduce_max(self, xs: Sequence[Node]) -> Node:
        """Max of scalar nodes; adjoint routes to the first maximal input."""

        def forward(*vals):
            return np.asarray(np.max(np.stack([np.asarray(v) for v in vals])))

        def vjp(g, out, *vals):
            stacked = np.stack([np.asarray(v) for v in vals])
            win = int(np.argmax(stacked))
            return tuple(g if i == win else np.zeros(()) for i in range(len(vals)))

        return self._push(list(xs), forward, vjp)

    # -- linear algebra ------------------------------------------------------

    def matmul(self, x: Node, w: np.ndarray) -> Node:
        return self._push(
            [x], lambda v: v @ w, lambda g, out, v: (g @ w.T,)
        )

    def interp_rows(self, phi: Node, cond: np.ndarray, uncond: np.ndarray) -> Node:
        """Row-wise interpolation phi*cond + (1-phi)*uncond; grad w.r.t. phi."""

        def forward(p):
            col = p[:, None]
            return col * cond + (1.0 - col) * uncond

        def vjp(g, out, p):
            return (((cond - uncond) * g).sum(axis=1),)

        return self._push([phi], forward, vjp)

    def attn_scores(self, k: Node, q: np.ndarray, sqrt_d: float) -> Node:
        """(Q @ K^T) / sqrt(d) with Q held constant within the step."""
        return self._push(
            [k],
            lambda kv: (q @ kv.T) / sqrt_d,
            lambda g, out, kv: ((g.T @ q) / sqrt_d,),
        )

    def row_softmax(self, s: Node) -> Node:
        def vjp(g, out, v):
            inner = (g * out).sum(axis=1, keepdims=True)
            return (out * (g - inner),)

        return self._push([s], row_softmax, vjp)

    def token_grid(self, attn: Node, token: int, side: int) -> Node:
        """Extract one token's P x P slice from a (P*P, N) attention matrix."""

        def vjp(g, out, v):
            gx = np.zeros_like(v)
            gx[:, token] = g.reshape(-1)
            return (gx,)

        return self._push(
            [attn], lambda v: v[:, token].reshape(side, side), vjp
        )

    # -- grid ops ------------------------------------------------------------

    def smooth(self, g: Node, kernel: GaussianKernel) -> Node:
        return self._push(
            [g],
            lambda v: grids.smooth(v, kernel),
            lambda gr, out, v: (grids.smooth_adjoint(gr, kernel),),
        )

    def pixel_softmax(self, g: Node) -> Node:
        return self._push(
            [g],
            grids.pixel_softmax,
            lambda gr, out, v: (grids.pixel_softmax_vjp(out, gr),),
        )

    def shift(self, g: Node, dr: int, dc: int) -> Node:
        """Translation with zero fill; offsets are data-dependent constants."""
        return self._push(
            [g],
            lambda v: grids.shift_with_zero_fill(v, dr, dc),
            lambda gr, out, v: (grids.shift_with_zero_fill(gr, -dr, -dc),),
        )

    def grid_max(self, g: Node) -> Node:
        def vjp(gr, out, v):
            gx = np.zeros_like(v)
            gx[grids.argmax_cell(v)] = float(gr)
            return (gx,)

        return self._push([g], lambda v: np.asarray(v.max()), vjp)

    # -- execution -----------------------------------------------------------

    def backward(self, loss: Node) -> None:
        """Accumulate adjoints into every node reachable from ``loss``."""
        if loss.value.shape != ():
            raise ValueError("backward expects a scalar loss node")
        loss.grad = np.ones(())
        for entry in reversed(self._entries):
            g = entry.out.grad
            if g is None:
                continue
            parent_grads = entry.vjp(g, entry.out.value, *(p.value for p in entry.parents))
            for parent, pg in zip(entry.parents, parent_grads):
                if parent.grad is None:
                    parent.grad = np.asarray(pg, dtype=np.float64).copy()
                else:
                    parent.grad = parent.grad + pg

    def replay(self, target: Node) -> np.ndarray:
        """Re-run every recorded forward and return the recomputed target value."""
        values: dict[int, np.ndarray] = {}
        for entry in self._entries:
            pvals = [values.get(id(p), p.value) for p in entry.parents]
            values[id(entry.out)] = np.asarray(entry.forward(*pvals), dtype=np.float64)
        return values.get(id(target), target.value)


def row_softmax(scores: np.ndarray) -> np.ndarray:
    """Softmax along the last axis with per-row max subtraction."""
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)
