"""Dense tensor with reverse-mode automatic differentiation.

Every differentiable operation produces a new :class:`Tensor` that keeps a
reference to its inputs and a closure mapping the output gradient to the
input gradients.  :meth:`Tensor.backward` orders the recorded nodes
topologically and runs those closures once each, in reverse.
"""

from __future__ import annotations

import contextlib
import os
import threading
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

_DTYPE = np.dtype(np.float64 if os.environ.get("C2DATT_FLOAT64") == "1" else np.float32)
_CHECK_FINITE = True
_local = threading.local()     # grad mode is per thread


def get_dtype() -> np.dtype:
    return _DTYPE


def set_dtype(dtype) -> None:
    """Set the storage dtype for newly created tensors (float32 or float64)."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default storage dtype, e.g. ``precision("float64")``."""
    previous = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


def set_finite_check(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def as_array(value, dtype=None) -> np.ndarray:
    dtype = _DTYPE if dtype is None else dtype
    if isinstance(value, Tensor):
        value = value.data
    arr = np.asarray(value)
    if arr.dtype != dtype:
        arr = arr.astype(dtype)
    return arr


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


GradFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """n-dimensional real array that optionally records its computation.

    ``data`` is a numpy array in the current default dtype.  ``grad`` is
    populated by :meth:`backward` for every tensor with ``requires_grad``
    that the loss depends on; gradients accumulate until :meth:`zero_grad`.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _grad_fn: GradFn | None = None, _op: str = ""):
        self.data = as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._grad_fn = _grad_fn
        self._op = _op
        self._released = False

    # -- basic properties -------------------------------------------------
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

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- graph machinery ---------------------------------------------------
    def backward(self, grad=None) -> None:
        """Populate ``.grad`` on every tensor that requires it.

        Only scalar outputs may be differentiated without an explicit seed.
        The graph is released afterwards; a second call raises.
        """
        if self._released:
            raise RuntimeError("backward called twice on the same graph; rebuild the forward pass first")
        if grad is None:
            if self.size != 1:
                raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = as_array(grad, self.dtype).reshape(self.shape)
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor that requires grad")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._grad_fn is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._grad_fn(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._grad_fn is not None:
                node._grad_fn = None
                node._parents = ()
                node._released = True

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = _wrap(other)
        a_shape, b_shape = self.shape, other.shape
        return _make(self.data + other.data, (self, other),
                     lambda g: (unbroadcast(g, a_shape), unbroadcast(g, b_shape)), "add")

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = _wrap(other)
        a_shape, b_shape = self.shape, other.shape
        return _make(self.data - other.data, (self, other),
                     lambda g: (unbroadcast(g, a_shape), unbroadcast(-g, b_shape)), "sub")

    def __rsub__(self, other) -> "Tensor":
        return _wrap(other) - self

    def __mul__(self, other) -> "Tensor":
        other = _wrap(other)
        a, b = self.data, other.data

        def grad_fn(g):
            return (unbroadcast(g * b, a.shape) if self.requires_grad else None,
                    unbroadcast(g * a, b.shape) if other.requires_grad else None)

        return _make(a * b, (self, other), grad_fn, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _wrap(other)
        a, b = self.data, other.data

        def grad_fn(g):
            return (unbroadcast(g / b, a.shape) if self.requires_grad else None,
                    unbroadcast(-g * a / (b * b), b.shape) if other.requires_grad else None)

        return _make(a / b, (self, other), grad_fn, "div")

    def __rtruediv__(self, other) -> "Tensor":
        return _wrap(other) / self

    def __neg__(self) -> "Tensor":
        return _make(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("tensor exponents are not supported")
        x = self.data
        out = x ** exponent
        return _make(out, (self,), lambda g: (g * exponent * x ** (exponent - 1),), "pow")

    def __matmul__(self, other) -> "Tensor":
        other = _wrap(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError("matmul supports 2-D operands only")

        def grad_fn(g):
            return (g @ b.T if self.requires_grad else None,
                    a.T @ g if other.requires_grad else None)

        return _make(a @ b, (self, other), grad_fn, "matmul")

    # -- reductions and shape ops ----------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        axes = _norm_axes(axis, self.ndim)

        def grad_fn(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, shape).copy(),)

        return _make(self.data.sum(axis=axes, keepdims=keepdims), (self,), grad_fn, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        axes = _norm_axes(axis, self.ndim)
        count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axes, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return _make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),), "transpose")

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape

        def grad_fn(g):
            full = np.zeros(shape, dtype=g.dtype)
            np.add.at(full, index, g)
            return (full,)

        return _make(self.data[index], (self,), grad_fn, "getitem")

    # -- element-wise math ------------------------------------------------
    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return _make(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        x = self.data
        return _make(np.log(x), (self,), lambda g: (g / x,), "log")

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return _make(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    def clamp_min(self, floor: float) -> "Tensor":
        x = self.data
        mask = x > floor
        return _make(np.where(mask, x, floor), (self,), lambda g: (g * mask,), "clamp_min")

    def clamp(self, low: float, high: float) -> "Tensor":
        x = self.data
        mask = (x > low) & (x < high)
        return _make(np.clip(x, low, high), (self,), lambda g: (g * mask,), "clamp")


def _raise_item(t: Tensor):
    raise ValueError(f"item() requires a single-element tensor, got shape {t.shape}")


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    if len(axis) == 0:
        raise ValueError("empty axis list")
    return tuple(sorted(a % ndim for a in axis))


def _check_finite(data: np.ndarray, op: str) -> None:
    if _CHECK_FINITE and not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite values produced by {op or 'operation'}")


def _make(data: np.ndarray, parents: Iterable[Tensor], grad_fn: GradFn, op: str) -> Tensor:
    """Wrap an op result, recording it on the graph when any input needs grad."""
    parents = tuple(parents)
    data = as_array(data, parents[0].dtype if parents else None)
    _check_finite(data, op)
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _grad_fn=grad_fn, _op=op)


make_op = _make


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DTYPE), requires_grad=requires_grad)
