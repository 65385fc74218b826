"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Every operation that produces a tensor records a closure that routes the
output gradient back to its inputs; ``Tensor.backward()`` walks the
recorded graph in reverse topological order and accumulates (sums)
gradients on every tensor that requires them. The graph is implicit in
the ``_prev`` links; it is acyclic by construction because results are
fresh objects.

Training runs in float32. Float64 can be selected per tensor or with the
``use_dtype`` context manager for verification runs where finite
differences must be tight.

Thread model: tensors that have been consumed by an operation are never
mutated; parameter arrays are rewritten only by the optimizer between
graph builds, on the single training thread. Read-only sharing of
``.data`` across threads is safe.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeMismatchError

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> np.dtype:
    """Set the dtype new tensors are created with; returns the previous one."""
    global _DEFAULT_DTYPE
    previous = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype)
    return previous


class use_dtype:
    """Context manager selecting the default dtype, e.g. float64 for checks."""

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype)
        self._previous = None

    def __enter__(self):
        self._previous = set_default_dtype(self.dtype)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self._previous)
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class no_grad:
    """Disable graph recording, e.g. for teacher forwards and evaluation."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._previous = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._previous
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        if isinstance(data, Tensor):
            raise ContractError("wrap raw array data, not another Tensor")
        self.data = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._prev: tuple[Tensor, ...] = ()
        self._backward = None

    # -- bookkeeping -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out.name = self.name
        out._prev = ()
        out._backward = None
        return out

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"

    # -- reverse pass ------------------------------------------------

    def backward(self) -> None:
        """Seed a scalar output with gradient 1 and backpropagate to leaves.

        Gradients accumulate by summation over all usage paths, so a tensor
        consumed twice receives both contributions.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar output, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- operator sugar ----------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _coerce(-1.0, self))

    def __sub__(self, other):
        return add(self, -_coerce(other, self))

    def __rsub__(self, other):
        return add(_coerce(other, self), -self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, _coerce(1.0 / float(other), self))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    # method aliases
    def relu(self):
        return relu(self)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def softmax(self, axis=-1):
        return softmax(self, axis=axis)

    def clip_min(self, lower):
        return clip_min(self, lower)


def parameter(data, name: str, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# -- helpers ---------------------------------------------------------


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype), dtype=like.data.dtype)


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = parents
    else:
        out.requires_grad = False
        out._prev = ()
    out._backward = None
    return out


def _sum_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the shape it was broadcast from."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


# -- primitive operations --------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = _from_op(a.data + b.data, (a, b))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accumulate(_sum_to(out.grad, a.data.shape))
            if b.requires_grad:
                b._accumulate(_sum_to(out.grad, b.data.shape))
        out._backward = _bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _from_op(a.data * b.data, (a, b))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accumulate(_sum_to(out.grad * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_sum_to(out.grad * a.data, b.data.shape))
        out._backward = _bw
    return out


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # float32 products accumulate in float64 and round once, which keeps the
    # result equal to a sequential-sum oracle after the final rounding.
    if a.dtype == np.float32 and b.dtype == np.float32:
        return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)
    return a @ b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatchError(
            f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatchError(
            f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}")
    out = _from_op(_mm(a.data, b.data), (a, b))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accumulate(_mm(out.grad, b.data.T))
            if b.requires_grad:
                b._accumulate(_mm(a.data.T, out.grad))
        out._backward = _bw
    return out


def relu(a: Tensor) -> Tensor:
    out = _from_op(np.maximum(a.data, 0), (a,))
    if out.requires_grad:
        def _bw():
            a._accumulate(out.grad * (a.data > 0))
        out._backward = _bw
    return out


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)
    if not np.isfinite(data).all():
        raise NumericError("log produced non-finite values; clamp inputs first")
    out = _from_op(data, (a,))
    if out.requires_grad:
        def _bw():
            a._accumulate(out.grad / a.data)
        out._backward = _bw
    return out


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    if not np.isfinite(data).all():
        raise NumericError("exp overflowed")
    out = _from_op(data, (a,))
    if out.requires_grad:
        def _bw():
            a._accumulate(out.grad * data)
        out._backward = _bw
    return out


def power(a: Tensor, exponent) -> Tensor:
    """Elementwise a**exponent for a scalar, non-negative-domain exponent."""
    exponent = float(exponent)
    out = _from_op(a.data ** exponent, (a,))
    if out.requires_grad:
        def _bw():
            if exponent == 0.0:
                return  # constant 1; gradient is exactly zero
            if exponent == 1.0:
                a._accumulate(out.grad)
                return
            a._accumulate(out.grad * exponent * a.data ** (exponent - 1.0))
        out._backward = _bw
    return out


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,))
    if out.requires_grad:
        axes = _normalize_axes(axis, a.data.ndim)

        def _bw():
            g = out.grad
            if not keepdims:
                g = np.expand_dims(g, axes)
            a._accumulate(np.broadcast_to(g, a.data.shape))
        out._backward = _bw
    return out


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    out = _from_op(a.data.mean(axis=axis, keepdims=keepdims), (a,))
    if out.requires_grad:
        def _bw():
            g = out.grad
            if not keepdims:
                g = np.expand_dims(g, axes)
            a._accumulate(np.broadcast_to(g, a.data.shape) / count)
        out._backward = _bw
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = _from_op(a.data.reshape(shape), (a,))
    if out.requires_grad:
        def _bw():
            a._accumulate(out.grad.reshape(a.data.shape))
        out._backward = _bw
    return out


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = _from_op(a.data.transpose(axes), (a,))
    if out.requires_grad:
        inverse = tuple(np.argsort(axes))

        def _bw():
            a._accumulate(out.grad.transpose(inverse))
        out._backward = _bw
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax: shifts by the axis maximum before exp."""
    if not np.isfinite(a.data).all():
        raise NumericError("softmax input contains non-finite values")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _from_op(y, (a,))
    if out.requires_grad:
        def _bw():
            g = out.grad
            inner = (g * y).sum(axis=axis, keepdims=True)
            a._accumulate(y * (g - inner))
        out._backward = _bw
    return out


def clip_min(a: Tensor, lower: float) -> Tensor:
    """max(a, lower); gradient is zero where the clamp binds."""
    lower = float(lower)
    out = _from_op(np.maximum(a.data, lower), (a,))
    if out.requires_grad:
        def _bw():
            a._accumulate(out.grad * (a.data > lower))
        out._backward = _bw
    return out


def take_per_row(a: Tensor, indices) -> Tensor:
    """Pick one column per row of a 2-D tensor: out[i] = a[i, indices[i]]."""
    idx = np.asarray(indices)
    if a.data.ndim != 2:
        raise ShapeMismatchError(f"take_per_row expects a 2-D tensor, got {a.data.shape}")
    if idx.shape != (a.data.shape[0],):
        raise ShapeMismatchError(
            f"index vector {idx.shape} does not match {a.data.shape[0]} rows")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[1]):
        raise ContractError("take_per_row index out of range")
    rows = np.arange(a.data.shape[0])
    out = _from_op(a.data[rows, idx], (a,))
    if out.requires_grad:
        def _bw():
            g = np.zeros_like(a.data)
            np.add.at(g, (rows, idx), out.grad)
            a._accumulate(g)
        out._backward = _bw
    return out


def take_rows(a: Tensor, indices) -> Tensor:
    """Select rows (first-axis entries) of a tensor by integer index."""
    idx = np.asarray(indices)
    out = _from_op(a.data[idx], (a,))
    if out.requires_grad:
        def _bw():
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            a._accumulate(g)
        out._backward = _bw
    return out
