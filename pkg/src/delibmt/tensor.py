"""Reverse-mode automatic differentiation over numpy arrays.

Tensors record a tape of closures: every op returns a new Tensor whose
`_backward_fn` scatters the output gradient back to its parents. Calling
`backward()` on a scalar loss walks the tape in reverse topological order
and accumulates `.grad` on every reachable tensor with `requires_grad`.

Storage is float32 by default; `using_dtype(np.float64)` switches the
whole engine for verification runs (finite-difference checks).
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from . import kernels
from .errors import ShapeError, VocabularyError

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"default dtype must be float32 or float64, got {dt}")
    _DEFAULT_DTYPE = dt


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the global storage dtype (e.g. float64 for gradient checks)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference/decoding)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """N-dimensional array with an optional backreference into the tape."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents, backward_fn) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward_fn = None
        return out

    @staticmethod
    def _coerce(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    # -- basic views ----------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        """The underlying array (not a copy); treat as read-only."""
        return self.data

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t.name = None
        t._parents = ()
        t._backward_fn = None
        return t

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- gradient plumbing ----------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            np.add(self.grad, g, out=self.grad, casting="unsafe")

    def backward(self) -> None:
        """Populate grads of every reachable requires_grad tensor. Loss must be scalar."""
        if self.data.size != 1:
            raise ShapeError(
                f"backward() needs a scalar loss, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = Tensor._coerce(other)
        a, b = self, other
        out_data = a.data + b.data

        def bwd(g):
            a._accumulate(_unbroadcast(g, a.data.shape))
            b._accumulate(_unbroadcast(g, b.data.shape))

        return Tensor._from_op(out_data, (a, b), bwd)

    __radd__ = __add__

    def __mul__(self, other):
        other = Tensor._coerce(other)
        a, b = self, other
        out_data = a.data * b.data

        def bwd(g):
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._from_op(out_data, (a, b), bwd)

    __rmul__ = __mul__

    def __neg__(self):
        a = self

        def bwd(g):
            a._accumulate(-g)

        return Tensor._from_op(-a.data, (a,), bwd)

    def __sub__(self, other):
        return self + (-Tensor._coerce(other))

    def __rsub__(self, other):
        return Tensor._coerce(other) + (-self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return self * (1.0 / other)
        other = Tensor._coerce(other)
        a, b = self, other
        out_data = a.data / b.data

        def bwd(g):
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return Tensor._from_op(out_data, (a, b), bwd)

    def __rtruediv__(self, other):
        return Tensor._coerce(other) / self

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self
        out_data = a.data**p

        def bwd(g):
            a._accumulate(g * p * a.data ** (p - 1))

        return Tensor._from_op(out_data, (a,), bwd)

    def __matmul__(self, other):
        return matmul(self, Tensor._coerce(other))

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        out_data = a.data.reshape(shape)

        def bwd(g):
            a._accumulate(g.reshape(a.data.shape))

        return Tensor._from_op(out_data, (a,), bwd)

    def transpose(self, *axes):
        a = self
        if not axes:
            axes = tuple(reversed(range(a.data.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)

        def bwd(g):
            a._accumulate(np.ascontiguousarray(g.transpose(inv)))

        return Tensor._from_op(
            np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd
        )

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, idx):
        a = self
        out_data = a.data[idx]
        if np.isscalar(out_data) or out_data.ndim == 0:
            out_data = np.asarray(out_data)

        def bwd(g):
            if not a.requires_grad:
                return
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accumulate(full)

        return Tensor._from_op(np.ascontiguousarray(out_data), (a,), bwd)

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        out_data = a.data.sum(axis=axis, keepdims=keepdims)
        out_data = np.asarray(out_data)

        def bwd(g):
            gg = g
            if axis is not None and not keepdims:
                axes = (axis,) if isinstance(axis, int) else tuple(axis)
                for ax in sorted(ax % a.data.ndim for ax in axes):
                    gg = np.expand_dims(gg, ax)
            a._accumulate(np.broadcast_to(gg, a.data.shape))

        return Tensor._from_op(out_data, (a,), bwd)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = 1
            for ax in axes:
                count *= self.data.shape[ax]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- pointwise nonlinearities ----------------------------------------------

    def relu(self):
        a = self
        out_data = np.maximum(a.data, 0)

        def bwd(g):
            a._accumulate(g * (a.data > 0))

        return Tensor._from_op(out_data, (a,), bwd)

    def exp(self):
        a = self
        out_data = np.exp(a.data)

        def bwd(g):
            a._accumulate(g * out_data)

        return Tensor._from_op(out_data, (a,), bwd)

    def log(self):
        a = self
        out_data = np.log(a.data)

        def bwd(g):
            a._accumulate(g / a.data)

        return Tensor._from_op(out_data, (a,), bwd)

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)

        def bwd(g):
            a._accumulate(g * 0.5 / out_data)

        return Tensor._from_op(out_data, (a,), bwd)

    def tanh(self):
        a = self
        out_data = np.tanh(a.data)

        def bwd(g):
            a._accumulate(g * (1.0 - out_data * out_data))

        return Tensor._from_op(out_data, (a,), bwd)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ------------------------------------------------------------------ free ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D, or N-D with identical leading batch dims."""
    a = Tensor._coerce(a)
    b = Tensor._coerce(b)
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2:
        raise ShapeError(f"matmul needs 2-D+ operands, got {A.shape} @ {B.shape}")
    if A.shape[-1] != B.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {A.shape} @ {B.shape}")
    if A.shape[:-2] != B.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions disagree: {A.shape} @ {B.shape}")
    out_data = A @ B

    def bwd(g):
        a._accumulate(g @ np.swapaxes(B, -1, -2))
        b._accumulate(np.swapaxes(A, -1, -2) @ g)

    return Tensor._from_op(out_data, (a, b), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [Tensor._coerce(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accumulate(g[tuple(idx)])

    return Tensor._from_op(out_data, tuple(tensors), bwd)


def _to_2d(arr: np.ndarray, axis: int):
    """Move `axis` last and flatten to [rows, d]; returns (flat, restore)."""
    moved = np.moveaxis(arr, axis, -1)
    shape = moved.shape
    flat = np.ascontiguousarray(moved).reshape(-1, shape[-1])

    def restore(flat_out):
        return np.moveaxis(flat_out.reshape(shape), -1, axis)

    return flat, restore


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis`; slices sum to 1."""
    x = Tensor._coerce(x)
    ax = axis % x.data.ndim if x.data.ndim else 0
    if x.data.ndim == 0 or x.data.shape[ax] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {x.data.shape}")
    flat, restore = _to_2d(x.data, ax)
    y_flat = kernels.softmax_forward(flat)
    out_data = np.ascontiguousarray(restore(y_flat))

    def bwd(g):
        g_flat, _ = _to_2d(np.ascontiguousarray(g), ax)
        dx = kernels.softmax_backward(g_flat, y_flat)
        x._accumulate(restore(dx))

    return Tensor._from_op(out_data, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = Tensor._coerce(x)
    ax = axis % x.data.ndim if x.data.ndim else 0
    if x.data.ndim == 0 or x.data.shape[ax] == 0:
        raise ShapeError(f"log_softmax over empty axis {axis} of shape {x.data.shape}")
    flat, restore = _to_2d(x.data, ax)
    y_flat = kernels.log_softmax_forward(flat)
    out_data = np.ascontiguousarray(restore(y_flat))

    def bwd(g):
        g_flat, _ = _to_2d(np.ascontiguousarray(g), ax)
        dx = kernels.log_softmax_backward(g_flat, y_flat)
        x._accumulate(restore(dx))

    return Tensor._from_op(out_data, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last dimension to mean 0 / variance 1, then scale and shift.

    Zero-variance rows normalize to 0 (the eps floor), so constant input maps
    to beta instead of NaN.
    """
    x = Tensor._coerce(x)
    gamma = Tensor._coerce(gamma)
    beta = Tensor._coerce(beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm gamma/beta must have shape ({d},), got "
            f"{gamma.data.shape} and {beta.data.shape}"
        )
    flat = np.ascontiguousarray(x.data.reshape(-1, d))
    y_flat, mean, rstd = kernels.layer_norm_forward(flat, gamma.data, beta.data, eps)
    out_data = y_flat.reshape(x.data.shape)

    def bwd(g):
        g_flat = np.ascontiguousarray(g.reshape(-1, d))
        dx, dgamma, dbeta = kernels.layer_norm_backward(
            g_flat, flat, gamma.data, mean, rstd
        )
        x._accumulate(dx.reshape(x.data.shape))
        gamma._accumulate(dgamma)
        beta._accumulate(dbeta)

    return Tensor._from_op(out_data, (x, gamma, beta), bwd)


def embedding(table: Tensor, ids, scale: bool = False) -> Tensor:
    """Row lookup, optionally scaled by sqrt(width) (transformer input scaling)."""
    table = Tensor._coerce(table)
    ids = np.asarray(ids, dtype=np.int64)
    vocab, d = table.data.shape
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = int(ids[(ids < 0) | (ids >= vocab)][0])
        raise VocabularyError(f"token id {bad} out of range for vocabulary size {vocab}")
    factor = math.sqrt(d) if scale else 1.0
    out_data = table.data[ids] * np.asarray(factor, dtype=table.data.dtype)

    def bwd(g):
        if not table.requires_grad:
            return
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g * np.asarray(factor, dtype=table.data.dtype))
        table._accumulate(full)

    return Tensor._from_op(out_data, (table,), bwd)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call only in training mode (p=0 returns x unchanged)."""
    if p <= 0.0:
        return x
    if p >= 1.0:
        raise ValueError(f"dropout rate must be < 1, got {p}")
    x = Tensor._coerce(x)
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    out_data = x.data * keep

    def bwd(g):
        x._accumulate(g * keep)

    return Tensor._from_op(out_data, (x,), bwd)
