"""Dense tensors with reverse-mode differentiation over a dynamically recorded graph.

Every op records its parents and a closure that pushes the upstream gradient
back into them.  ``backward`` walks the graph in exact reverse topological
order, so fan-out accumulates additively.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


class NumericError(ValueError):
    """Raised when a tensor computation hits a NaN/Inf or an ill-posed input."""


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for new float tensors (64-bit for grad checks)."""
    global _DEFAULT_DTYPE
    prev, _DEFAULT_DTYPE = _DEFAULT_DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = ""
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def _accum(self, g: np.ndarray) -> None:
        # never mutate in place: g may alias a sibling's gradient or be a broadcast view
        self.grad = g if self.grad is None else self.grad + g

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other, self.dtype)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.shape))

        return Tensor._make(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: self._accum(-g))

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other, self.dtype)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g, b.shape))

        return Tensor._make(a.data - b.data, (a, b), bw)

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other, self.dtype) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other, self.dtype)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.shape))

        return Tensor._make(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other, self.dtype)
        a, b = self, other
        out_data = a.data / b.data

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g * out_data / b.data, b.shape))

        return Tensor._make(out_data, (a, b), bw)

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other, self.dtype) / self

    def __pow__(self, p: float) -> "Tensor":
        if isinstance(p, Tensor):
            raise TypeError("tensor exponents are not supported")
        x = self

        def bw(g):
            x._accum(g * p * x.data ** (p - 1))

        return Tensor._make(x.data**p, (x,), bw)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, idx) -> "Tensor":
        x = self
        if isinstance(idx, Tensor):
            raise TypeError("index with numpy arrays, not tensors")
        out = x.data[idx]

        def bw(g):
            full = np.zeros_like(x.data)
            np.add.at(full, idx, g)
            x._accum(full)

        return Tensor._make(out, (x,), bw)

    # -- elementwise ----------------------------------------------------------
    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: self._accum(g * out))

    def log(self) -> "Tensor":
        x = self
        return Tensor._make(np.log(x.data), (x,), lambda g: x._accum(g / x.data))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: self._accum(g * 0.5 / out))

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: self._accum(g * (1.0 - out * out)))

    # -- reductions -------------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        x = self
        out = x.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            x._accum(np.broadcast_to(g, x.shape))

        return Tensor._make(np.asarray(out), (x,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- shape ------------------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        x = self
        return Tensor._make(x.data.reshape(shape), (x,), lambda g: x._accum(g.reshape(x.shape)))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        x = self
        return Tensor._make(x.data.transpose(axes), (x,), lambda g: x._accum(g.transpose(inv)))

    def swapaxes(self, a: int, b: int) -> "Tensor":
        x = self
        return Tensor._make(np.swapaxes(x.data, a, b), (x,), lambda g: x._accum(np.swapaxes(g, a, b)))

    @property
    def T(self) -> "Tensor":
        return self.swapaxes(-1, -2)

    # -- graph ----------------------------------------------------------------
    def backward(self, params: Iterable["Tensor"] | None = None) -> dict:
        return backward(self, params)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _DEFAULT_DTYPE))


def parameter(data, name: str = "") -> Tensor:
    return Tensor(np.array(data, dtype=_DEFAULT_DTYPE), requires_grad=True, name=name)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict:
    """Back-propagate from a scalar ``loss``.

    Leaf gradients accumulate into ``.grad``.  When ``params`` is given, any of
    them not reached by the graph get a zero gradient, and the returned dict
    maps each of those tensors to its gradient.
    """
    if loss.size != 1:
        raise NumericError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("loss is not finite")
    params = list(params) if params is not None else []
    if loss.requires_grad:
        order = _topo_order(loss)
        loss._accum(np.ones_like(loss.data))
        for node in reversed(order):
            if node._backward is None:
                continue
            g, node.grad = node.grad, None
            if g is not None:
                node._backward(g)
    result = {}
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        result[p] = p.grad
    return result


# ---------------------------------------------------------------------------
# free functions
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return Tensor._make(a.data @ b.data, (a, b), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accum(part)

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([t.reshape(t.shape[:axis] + (1,) + t.shape[axis:]) if axis >= 0 else
                   t.reshape(t.shape + (1,)) for t in tensors], axis=axis)


def where(mask: np.ndarray, a: Tensor, b) -> Tensor:
    """Elementwise select with a constant boolean ``mask``."""
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    mask = np.asarray(mask, dtype=bool)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(np.where(mask, g, 0.0), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.where(mask, 0.0, g), b.shape))

    return Tensor._make(np.where(mask, a.data, b.data), (a, b), bw)
