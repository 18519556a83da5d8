"""Minimal dense tensor with reverse-mode automatic differentiation.

Each differentiable operation records its parents and a closure mapping the
output gradient to parent gradients. :func:`backward` orders the recorded
graph topologically from the scalar root and accumulates gradients into every
leaf that requires them (``+=``; use :meth:`Tensor.zero_grad` between steps).

GELU uses the tanh approximation ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``
in both the forward pass and its derivative.
"""

from __future__ import annotations

import math
import os
import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
DEBUG_FINITE = bool(os.environ.get("UNIFORMER_DEBUG"))

_state = threading.local()

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    """Array value plus optional gradient slot and graph links."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    # -- basics ---------------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        if DEBUG_FINITE and not np.all(np.isfinite(data)):
            raise FloatingPointError("non-finite value produced by forward op")
        out = Tensor(data, dtype=data.dtype)
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype), dtype=self.dtype)

    @staticmethod
    def _check_shapes(a: "Tensor", b: "Tensor") -> None:
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}") from None

    # -- elementwise arithmetic ----------------------------------------
    def __add__(self, other) -> "Tensor":
        other = self._lift(other)
        self._check_shapes(self, other)
        a, b = self, other
        return Tensor._make(a.data + b.data, (a, b),
                            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = self._lift(other)
        self._check_shapes(self, other)
        a, b = self, other
        return Tensor._make(a.data - b.data, (a, b),
                            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

    def __rsub__(self, other) -> "Tensor":
        return self._lift(other) - self

    def __mul__(self, other) -> "Tensor":
        other = self._lift(other)
        self._check_shapes(self, other)
        a, b = self, other
        return Tensor._make(a.data * b.data, (a, b),
                            lambda g: (_unbroadcast(g * b.data, a.shape),
                                       _unbroadcast(g * a.data, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        return self * self._lift(other).reciprocal()

    def __rtruediv__(self, other) -> "Tensor":
        return self._lift(other) * self.reciprocal()

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p: float) -> "Tensor":
        x = self
        return Tensor._make(x.data ** p, (x,), lambda g: (g * p * x.data ** (p - 1),))

    def reciprocal(self) -> "Tensor":
        y = 1.0 / self.data
        return Tensor._make(y, (self,), lambda g: (-g * y * y,))

    def exp(self) -> "Tensor":
        y = np.exp(self.data)
        return Tensor._make(y, (self,), lambda g: (g * y,))

    def log(self) -> "Tensor":
        x = self
        return Tensor._make(np.log(x.data), (x,), lambda g: (g / x.data,))

    def sqrt(self) -> "Tensor":
        y = np.sqrt(self.data)
        return Tensor._make(y, (self,), lambda g: (g * 0.5 / y,))

    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)
        return Tensor._make(y, (self,), lambda g: (g * (1.0 - y * y),))

    def gelu(self) -> "Tensor":
        x = self.data
        t = np.tanh(_GELU_C * (x + _GELU_A * x ** 3))
        y = 0.5 * x * (1.0 + t)

        def back(g):
            dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
            return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

        return Tensor._make(y, (self,), back)

    # -- reductions and shape ops --------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        x = self
        y = np.sum(x.data, axis=axis, keepdims=keepdims)

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)

        return Tensor._make(np.asarray(y, dtype=x.dtype), (x,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        x = self
        return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    permute = transpose

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __getitem__(self, key) -> "Tensor":
        x = self

        def back(g):
            out = np.zeros_like(x.data)
            np.add.at(out, key, g)
            return (out,)

        return Tensor._make(np.array(x.data[key]), (x,), back)

    def take(self, indices, axis: int) -> "Tensor":
        """Gather along ``axis`` with a shared integer index array."""
        x = self
        idx = np.asarray(indices, dtype=np.int64)
        axis = axis % x.ndim

        def back(g):
            out = np.zeros_like(x.data)
            np.add.at(np.moveaxis(out, axis, 0), idx, np.moveaxis(g, axis, 0))
            return (out,)

        return Tensor._make(np.take(x.data, idx, axis=axis), (x,), back)

    # -- linear algebra ------------------------------------------------
    def __matmul__(self, other) -> "Tensor":
        return matmul(self, self._lift(other))

    def softmax(self, axis: int = -1) -> "Tensor":
        z = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)
        return Tensor._make(y, (self,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))

    def log_softmax(self, axis: int = -1) -> "Tensor":
        z = self.data - self.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
        y = z - lse
        p = np.exp(y)
        return Tensor._make(y, (self,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes with broadcast batch axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimension mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul batch dimension mismatch: {a.shape} @ {b.shape}") from None

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._make(a.data @ b.data, (a, b), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    edges = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, np.arange(edges[i], edges[i + 1]), axis=axis) for i in range(len(tensors)))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def pad(x: Tensor, widths: Sequence[tuple]) -> Tensor:
    """Zero padding with ``np.pad``-style ``(before, after)`` pairs."""
    widths = [tuple(w) for w in widths]
    sl = tuple(slice(b, b + n) for (b, _), n in zip(widths, x.shape))
    return Tensor._make(np.pad(x.data, widths), (x,), lambda g: (g[sl],))


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Per-sample gather along axis 1: ``out[n, m] = x[n, idx[n, m]]``."""
    idx = np.asarray(idx, dtype=np.int64)
    batch = np.arange(x.shape[0])[:, None]

    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, (batch, idx), g)
        return (out,)

    return Tensor._make(x.data[batch, idx], (x,), back)


def backward(root: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Accumulate d(root)/d(leaf) into every leaf with ``requires_grad``."""
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("root does not depend on any tensor that requires grad")

    # iterative post-order DFS; each node visited once
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(root): np.ones_like(root.data) if grad is None else np.asarray(grad, dtype=root.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg


Tensor.backward = backward


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
              max_elements: Optional[int] = None, seed: int = 0, zero_tol: float = 1e-7) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps the inputs to any tensor; it is reduced to a scalar through a
    fixed random projection so every output element contributes. Relative error
    per element is ``|a - n| / max(|a|, |n|, 1e-8)``; elements where both
    ``|a|`` and ``|n|`` are below ``zero_tol`` are skipped (structurally zero
    gradients, such as a key bias under softmax, leave only rounding noise in
    the numeric estimate). Inputs must be float64.
    """
    from .rng import SplitMix64

    rng = SplitMix64(seed)
    out = fn(*inputs)
    proj = rng.uniform(-1.0, 1.0, out.shape)

    def scalar() -> float:
        with no_grad():
            return float(np.sum(fn(*inputs).data * proj))

    for t in inputs:
        t.zero_grad()
    loss = (out * Tensor(proj, dtype=out.dtype)).sum()
    backward(loss)

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        if not t.data.flags.c_contiguous:
            raise ValueError("gradcheck inputs must be C-contiguous")
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        picks = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            picks = np.sort(rng.permutation(flat.size)[:max_elements])
        for i in picks:
            orig = flat[i]
            flat[i] = orig + eps
            fp = scalar()
            flat[i] = orig - eps
            fm = scalar()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[i]
            if max(abs(a), abs(num)) < zero_tol:
                continue
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
