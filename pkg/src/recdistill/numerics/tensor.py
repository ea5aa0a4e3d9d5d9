"""Dense tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active, and that touch at least one
tensor with ``requires_grad``, are recorded in execution order. ``Tape.backward``
walks that record in exact reverse order and accumulates gradients additively,
so a parameter used several times (weight tying, recursion) receives the sum of
its per-use contributions.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_local = threading.local()


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations for one forward trace.

    Usage::

        with Tape() as tape:
            loss = model_loss(params)
        tape.backward(loss)

    A tape supports exactly one backward pass.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], backward: Callable) -> None:
        if self._consumed:
            raise TapeError("cannot record on a tape that has already been differentiated")
        self._nodes.append((out, parents, backward))

    def backward(self, loss: "Tensor", grad: np.ndarray | None = None) -> None:
        if self._consumed:
            raise TapeError("backward already ran on this tape")
        self._consumed = True
        if grad is None:
            if loss.data.size != 1:
                raise ShapeError("backward without an explicit grad needs a scalar output")
            grad = np.ones_like(loss.data)
        loss.grad = np.asarray(grad, dtype=loss.data.dtype)
        for out, parents, fn in reversed(self._nodes):
            g = out.grad
            if g is None:
                continue
            for parent, pg in zip(parents, fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                parent.grad = pg if parent.grad is None else parent.grad + pg
            if out is not loss:
                out.grad = None
        self._nodes.clear()


class no_grad:
    """Suspend recording (e.g. for the frozen teacher forward)."""

    def __enter__(self):
        _tape_stack().append(None)

    def __exit__(self, *exc):
        _tape_stack().pop()


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def as_tensor(value, dtype=None) -> "Tensor":
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype or DEFAULT_DTYPE))


def make_result(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
    """Wrap ``data`` as an op output, recording it on the active tape if needed."""
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.is_leaf = False
        tape.record(out, tuple(parents), backward)
    return out


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        a, b = self, self._coerce(other)

        def backward(g):
            return (
                _unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None,
            )

        return make_result(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self, self._coerce(other)

        def backward(g):
            return (
                _unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None,
            )

        return make_result(a.data - b.data, (a, b), backward)

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        a, b = self, self._coerce(other)

        def backward(g):
            return (
                _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
            )

        return make_result(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, self._coerce(other)

        def backward(g):
            return (
                _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None,
            )

        return make_result(a.data / b.data, (a, b), backward)

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __neg__(self):
        a = self
        return make_result(-a.data, (a,), lambda g: (-g,))

    def __matmul__(self, other):
        a, b = self, self._coerce(other)
        if a.ndim < 1 or b.ndim < 2:
            raise ShapeError(f"matmul needs ndim>=2 on the right, got {a.shape} @ {b.shape}")

        def backward(g):
            ga = gb = None
            if a.requires_grad:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
            if b.requires_grad:
                if b.ndim == 2 and a.ndim > 2:
                    k, n = b.shape
                    gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
                else:
                    gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            return ga, gb

        return make_result(a.data @ b.data, (a, b), backward)

    # shape ----------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        a = self
        return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, index):
        a = self

        def backward(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            return (full,)

        return make_result(a.data[index], (a,), backward)

    # reductions -------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return make_result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # elementwise ------------------------------------------------------------

    def exp(self):
        a = self
        out = np.exp(a.data)
        return make_result(out, (a,), lambda g: (g * out,))

    def log(self):
        a = self
        return make_result(np.log(a.data), (a,), lambda g: (g / a.data,))

    def sqrt(self):
        a = self
        out = np.sqrt(a.data)
        return make_result(out, (a,), lambda g: (g * 0.5 / out,))

    def __pow__(self, exponent: float):
        a = self
        return make_result(
            a.data**exponent, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),)
        )


def parameter(data, dtype=None) -> Tensor:
    if dtype is None:
        floating = isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating)
        dtype = data.dtype if floating else DEFAULT_DTYPE
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)
