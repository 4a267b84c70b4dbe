"""Dense tensors with reverse-mode automatic differentiation.

Values live in numpy arrays (float32 unless another working precision is
selected with :func:`precision`).  Each differentiable operation records its
inputs and a backward rule; :meth:`Tensor.backward` walks the recorded graph
once in reverse topological order and then releases it, so every training
step rebuilds its graph by re-running the forward pass.

Reductions accumulate in float64 and cast back to the working precision.
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import GraphError, NumericError, ParameterError, ShapeError


class _Mode(threading.local):
    grad_enabled = True
    dtype = np.float32
    debug = False


_mode = _Mode()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording them on the graph."""
    prev = _mode.grad_enabled
    _mode.grad_enabled = False
    try:
        yield
    finally:
        _mode.grad_enabled = prev


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Create new tensors in ``dtype`` (e.g. float64 for gradient checks)."""
    prev = _mode.dtype
    _mode.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _mode.dtype = prev


def set_debug(enabled: bool) -> None:
    """Toggle fail-fast NaN/Inf detection after every operation."""
    _mode.debug = bool(enabled)


def _sum(x: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
    return np.asarray(np.sum(x, axis=axis, dtype=np.float64, keepdims=keepdims)).astype(x.dtype)


def _mean(x: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
    return np.asarray(np.mean(x, axis=axis, dtype=np.float64, keepdims=keepdims)).astype(x.dtype)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and g.shape[i + lead] != 1
    )
    return _sum(g, axis=axes, keepdims=True).reshape(shape)


class Tensor:
    """An n-dimensional array that can take part in reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_released")
    __array_ufunc__ = None  # make ndarray <op> Tensor dispatch to the Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or _mode.dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._released = False

    # ------------------------------------------------------------------ basics
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
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # --------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # ---------------------------------------------------------------- backward
    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor that requires it.

        Leaf gradients accumulate across calls; the graph between the leaves
        and this tensor is released afterwards, so calling ``backward`` twice
        on the same result is an error.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._released:
            raise GraphError("graph already consumed by a previous backward(); re-run the forward pass")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor that requires grad")

        order = _topological_order(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                g = np.array(g, dtype=node.data.dtype)
                node.grad = g if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._released = True


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
        if node._released:
            raise GraphError("part of this graph was consumed by an earlier backward(); re-run the forward pass")
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    data = np.asarray(data)
    if _mode.debug and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op} (shape {data.shape})")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._released = False
    out.requires_grad = _mode.grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _result(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    return _result(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the argument is clamped from below first."""
    a = as_tensor(a)
    x = a.data if floor is None else np.maximum(a.data, a.data.dtype.type(floor))

    def backward(g):
        gx = g / x
        if floor is not None:
            gx = np.where(a.data >= floor, gx, 0).astype(g.dtype)
        return (gx,)

    return _result(np.log(x), (a,), backward, "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _result(out, (a,), backward, "gelu")


# ----------------------------------------------------------------- reductions
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _result(_sum(a.data, axes, keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _result(_mean(a.data, axes, keepdims), (a,), backward, "mean")


# ------------------------------------------------------------------ structure
def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _result(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if _is_basic_index(index):
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), backward, "getitem")


def gather_rows(a, rows) -> Tensor:
    """Select rows along axis 0; repeated indices accumulate gradient."""
    return getitem(a, np.asarray(rows, dtype=np.int64))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    ax = axis % parts[0].ndim
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    try:
        data = np.concatenate([p.data for p in parts], axis=ax)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}") from exc
    return _result(data, parts, backward, "concat")


# -------------------------------------------------------------- normalizers
def softmax_temp(logits, tau: float = 1.0, axis: int = -1) -> Tensor:
    """softmax(logits / tau) along ``axis``, stabilized by max-subtraction."""
    if not tau > 0:
        raise ParameterError(f"softmax temperature must be positive, got {tau}")
    x = as_tensor(logits)
    z = x.data / x.data.dtype.type(tau)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    p = e / _sum(e, axis, keepdims=True)

    def backward(g):
        gz = p * (g - _sum(g * p, axis, keepdims=True))
        return (gz / x.data.dtype.type(tau),)

    return _result(p, (x,), backward, "softmax")


def layer_norm(x, weight, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    mu = _mean(x.data, -1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt(_mean(centered * centered, -1, keepdims=True) + x.data.dtype.type(eps))
    xhat = centered * inv
    out = xhat * weight.data + bias.data

    def backward(g):
        gxhat = g * weight.data
        gx = inv * (
            gxhat - _mean(gxhat, -1, keepdims=True) - xhat * _mean(gxhat * xhat, -1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, _sum(g * xhat, lead), _sum(g, lead)

    return _result(out, (x, weight, bias), backward, "layer_norm")


def batch_norm_columns(z, eps: float = 1e-5) -> Tensor:
    """Standardize each column over the batch: (z - mean) / sqrt(var + eps).

    Variance is the population estimator (divides by N).
    """
    z = as_tensor(z)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ShapeError(f"batch_norm_columns needs an N x D input with N >= 2, got {z.shape}")
    mu = _mean(z.data, 0, keepdims=True)
    centered = z.data - mu
    inv = 1.0 / np.sqrt(_mean(centered * centered, 0, keepdims=True) + z.data.dtype.type(eps))
    zhat = centered * inv

    def backward(g):
        return (inv * (g - _mean(g, 0, keepdims=True) - zhat * _mean(g * zhat, 0, keepdims=True)),)

    return _result(zhat, (z,), backward, "batch_norm")


def l2_normalize(x, axis: int = -1, eps: float = 1e-6) -> Tensor:
    x = as_tensor(x)
    return x / sqrt(sum_(x * x, axis, keepdims=True) + eps)


def detach(x) -> Tensor:
    return as_tensor(x).detach()
