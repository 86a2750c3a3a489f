"""Minimal reverse-mode autodiff on float64 NumPy arrays.

A `Tensor` records its parents and a backward closure; `backward()` walks the
graph in reverse topological order. Only the operations the denoiser needs
are implemented. Elementwise/row kernels route through
:mod:`proseco.kernels` so the compiled backend accelerates both passes.

Gradient buffers are borrowed, never mutated: a node accumulating a second
contribution allocates a fresh sum, so backward closures may safely hand the
same array (or views) to multiple parents.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .core import NumericError

__all__ = [
    "Tensor",
    "leaf",
    "linear",
    "gather",
    "take_rows",
    "layernorm",
    "silu",
    "softmax",
    "log_softmax",
    "gather_last",
    "clamp_min",
    "mul_const",
    "add_const",
    "sum_all",
    "stop_gradient",
    "backward",
]


class Tensor:
    __slots__ = ("value", "grad", "parents", "bwd", "name")

    def __init__(self, value, parents=(), bwd=None, name=""):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.bwd = bwd
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def _acc(self, g):
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g  # out of place: grad buffers are shared

    # --- composable ops -------------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        out = Tensor(self.value + other.value, (self, other), name="add")

        def bwd(g):
            self._acc(_unbroadcast(g, self.value.shape))
            other._acc(_unbroadcast(g, other.value.shape))

        out.bwd = bwd
        return out

    def matmul(self, other: "Tensor") -> "Tensor":
        out = Tensor(self.value @ other.value, (self, other), name="matmul")

        def bwd(g):
            self._acc(_unbroadcast(g @ _swap(other.value), self.value.shape))
            other._acc(_unbroadcast(_swap(self.value) @ g, other.value.shape))

        out.bwd = bwd
        return out

    def reshape(self, *shape) -> "Tensor":
        src = self.value.shape
        out = Tensor(self.value.reshape(*shape), (self,), name="reshape")
        out.bwd = lambda g: self._acc(g.reshape(src))
        return out

    def transpose(self, axes) -> "Tensor":
        inv = np.argsort(axes)
        out = Tensor(self.value.transpose(axes), (self,), name="transpose")
        out.bwd = lambda g: self._acc(g.transpose(inv))
        return out

    def scale(self, c: float) -> "Tensor":
        out = Tensor(self.value * c, (self,), name="scale")
        out.bwd = lambda g: self._acc(g * c)
        return out


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to the shape the operand had before broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def leaf(value, name="") -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64), name=name or "leaf")


def stop_gradient(x: Tensor) -> Tensor:
    """Barrier: same value, no gradient flows to ``x`` or anything behind it."""
    return Tensor(x.value.copy(), name="stop_gradient")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) with a single flat GEMM in the weight backward.

    ``x`` is (..., k), ``w`` is (k, n), ``b`` is (n,).
    """
    y = x.value @ w.value
    if b is not None:
        y += b.value
    out = Tensor(y, (x, w, b) if b is not None else (x, w), name="linear")

    def bwd(g):
        x._acc(g @ w.value.T)
        gf = g.reshape(-1, g.shape[-1])
        w._acc(x.value.reshape(-1, x.value.shape[-1]).T @ gf)
        if b is not None:
            b._acc(gf.sum(axis=0))

    out.bwd = bwd
    return out


def gather(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup table[ids] for integer ids of any shape."""
    ids = np.asarray(ids)
    out = Tensor(table.value[ids], (table,), name="gather")

    def bwd(g):
        flat_ids = ids.reshape(-1)
        flat_g = g.reshape(len(flat_ids), -1)
        # one-hot matmul scatter: much faster than add.at for small tables
        onehot = np.zeros((flat_ids.size, table.value.shape[0]))
        onehot[np.arange(flat_ids.size), flat_ids] = 1.0
        table._acc(onehot.T @ flat_g)

    out.bwd = bwd
    return out


def take_rows(table: Tensor, n: int) -> Tensor:
    """First n rows of a table (position encodings)."""
    out = Tensor(table.value[:n], (table,), name="take_rows")

    def bwd(g):
        full = np.zeros_like(table.value)
        full[:n] = g
        table._acc(full)

    out.bwd = bwd
    return out


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    y, mean, rstd = kernels.layernorm_fwd(x.value, gain.value, bias.value, eps)
    out = Tensor(y, (x, gain, bias), name="layernorm")

    def bwd(g):
        dx, dgain, dbias = kernels.layernorm_bwd(x.value, gain.value, mean, rstd, g)
        x._acc(dx)
        gain._acc(dgain)
        bias._acc(dbias)

    out.bwd = bwd
    return out


def silu(x: Tensor) -> Tensor:
    y, sig = kernels.silu_fwd(x.value)
    out = Tensor(y, (x,), name="silu")
    out.bwd = lambda g: x._acc(kernels.silu_bwd(x.value, sig, g))
    return out


def softmax(x: Tensor) -> Tensor:
    probs = kernels.softmax_fwd(x.value)
    out = Tensor(probs, (x,), name="softmax")
    out.bwd = lambda g: x._acc(kernels.softmax_bwd(probs, g))
    return out


def log_softmax(x: Tensor) -> Tensor:
    logp = kernels.log_softmax_fwd(x.value)
    out = Tensor(logp, (x,), name="log_softmax")
    out.bwd = lambda g: x._acc(kernels.log_softmax_bwd(logp, g))
    return out


def gather_last(x: Tensor, ids: np.ndarray) -> Tensor:
    """Pick x[..., ids] along the last axis, one id per row: (B, L, A) -> (B, L)."""
    ids = np.asarray(ids)
    if ids.ndim > 1:
        idx = np.ix_(*[np.arange(s) for s in ids.shape])
        picked = x.value[idx + (ids,)]
    else:
        idx = None
        picked = x.value[np.arange(len(ids)), ids]
    out = Tensor(picked, (x,), name="gather_last")

    def bwd(g):
        full = np.zeros_like(x.value)
        if ids.ndim > 1:
            full[idx + (ids,)] = g
        else:
            full[np.arange(len(ids)), ids] = g
        x._acc(full)

    out.bwd = bwd
    return out


def clamp_min(x: Tensor, floor: float) -> Tensor:
    out = Tensor(np.maximum(x.value, floor), (x,), name="clamp_min")
    out.bwd = lambda g: x._acc(g * (x.value > floor))
    return out


def mul_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Elementwise multiply by a constant array (masks, loss weights)."""
    out = Tensor(x.value * c, (x,), name="mul_const")
    out.bwd = lambda g: x._acc(g * c)
    return out


def add_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Add a constant array (e.g. -inf column mask on reserved tokens)."""
    out = Tensor(x.value + c, (x,), name="add_const")
    out.bwd = lambda g: x._acc(g)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.value.sum()), (x,), name="sum")
    out.bwd = lambda g: x._acc(np.broadcast_to(g, x.value.shape))
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep seeding d(loss)/d(loss) = 1.

    Raises NumericError, naming the first offending node, if the loss value
    is not finite.
    """
    if not np.all(np.isfinite(loss.value)):
        for node in _toposort(loss):
            if not np.all(np.isfinite(node.value)):
                raise NumericError(f"non-finite value produced by op {node.name!r}")
        raise NumericError("non-finite loss")
    loss.grad = np.ones_like(loss.value)
    for node in reversed(_toposort(loss)):
        if node.bwd is not None and node.grad is not None:
            node.bwd(node.grad)
