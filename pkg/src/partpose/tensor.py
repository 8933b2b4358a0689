"""Reverse-mode automatic differentiation over dense numpy arrays.

The engine is deliberately small. A :class:`Tensor` wraps an ``ndarray`` and,
when gradients are required, a reference to the :class:`Function` that produced
it. :func:`backward` walks the graph in reverse topological order with plain
numpy vector-Jacobian products. :func:`grad` with ``create_graph=True`` instead
builds the vector-Jacobian products out of tensor ops, which is what the input
gradient penalty of a WGAN-GP critic needs. Only ops flagged
``differentiable_twice`` support that path; anything else raises
:class:`DoubleBackwardError` while the gradient graph is being built.

Broadcasting is limited to a missing leading batch: in a binary op the shorter
operand shape must equal the trailing dimensions of the longer one. Everything
else goes through an explicit :func:`broadcast_to`.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Function",
    "ShapeError",
    "DoubleBackwardError",
    "tensor",
    "as_tensor",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "grad",
    "concat",
    "stack",
    "linear",
    "broadcast_to",
    "where",
    "input_gradient_penalty",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""


class DoubleBackwardError(RuntimeError):
    """An op on a create_graph path has no differentiable backward."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_ctx", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float64)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._ctx: Function | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
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

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        op = f" op={type(self._ctx).__name__}" if self._ctx is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}{op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, _like(other, self))

    def __radd__(self, other):
        return Add.apply(_like(other, self), self)

    def __sub__(self, other):
        return Sub.apply(self, _like(other, self))

    def __rsub__(self, other):
        return Sub.apply(_like(other, self), self)

    def __mul__(self, other):
        return Mul.apply(self, _like(other, self))

    def __rmul__(self, other):
        return Mul.apply(_like(other, self), self)

    def __truediv__(self, other):
        return Div.apply(self, _like(other, self))

    def __rtruediv__(self, other):
        return Div.apply(_like(other, self), self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, p):
        if isinstance(p, Tensor):
            raise TypeError("tensor exponents are not supported")
        return Pow.apply(self, p=float(p))

    def __matmul__(self, other):
        return MatMul.apply(self, as_tensor(other))

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    # -- methods ------------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return Transpose.apply(self, axes=axes)

    def swap_last(self):
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(tuple(axes))

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)

    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return Max.apply(self, axis=axis, keepdims=keepdims)

    def logsumexp(self, axis=None, keepdims=False):
        return LogSumExp.apply(self, axis=axis, keepdims=keepdims)

    def norm(self, axis=None, keepdims=False):
        return Norm.apply(self, axis=axis, keepdims=keepdims)

    def std(self, axis=0, ddof=1, keepdims=False):
        return Std.apply(self, axis=axis, ddof=ddof, keepdims=keepdims)

    def sin(self, omega: float = 1.0):
        return Sin.apply(self, omega=float(omega))

    def cos(self):
        return Cos.apply(self)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def sqrt(self):
        return Sqrt.apply(self)

    def abs(self):
        return Abs.apply(self)

    def sigmoid(self):
        return Sigmoid.apply(self)

    def relu(self):
        return Relu.apply(self)

    def leaky_relu(self, slope: float = 0.2):
        return LeakyRelu.apply(self, slope=float(slope))

    def clip(self, lo: float, hi: float):
        return Clip.apply(self, lo=float(lo), hi=float(hi))

    def backward(self, leaves: Sequence["Tensor"] | None = None) -> None:
        backward(self, leaves)


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _like(x, ref: Tensor) -> Tensor:
    """Wrap a constant with the dtype of ``ref`` so f32 graphs stay f32."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


# ---------------------------------------------------------------------------
# Function base
# ---------------------------------------------------------------------------
class Function:
    """One node of the graph.

    Subclasses implement ``forward`` on arrays and ``backward`` returning one
    array (or ``None``) per parent. Ops that can sit inside a create_graph
    backward also implement ``backward_graph`` in terms of tensor ops.
    """

    differentiable_twice = False
    parents: tuple

    def __init__(self, **kwargs):
        for k, v in kwargs.items():
            setattr(self, k, v)

    @classmethod
    def apply(cls, *parents: Tensor, **kwargs) -> Tensor:
        fn = cls(**kwargs)
        fn.parents = parents
        out = Tensor(fn.forward(*[p.data for p in parents]))
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._ctx = fn
        return out

    def forward(self, *arrays: np.ndarray) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def backward(self, g: np.ndarray) -> tuple:  # pragma: no cover - abstract
        raise NotImplementedError

    def backward_graph(self, g: Tensor) -> tuple:
        raise DoubleBackwardError(
            f"op {type(self).__name__} is not differentiable twice; "
            "it cannot appear inside a gradient-penalty graph"
        )


def _check_suffix(op: str, a: tuple, b: tuple) -> None:
    short, long = (a, b) if len(a) <= len(b) else (b, a)
    if tuple(long[len(long) - len(short):]) != tuple(short):
        raise ShapeError(f"{op}: incompatible shapes {a} and {b} (only a leading batch may broadcast)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _unbroadcast_t(g: Tensor, shape: tuple) -> Tensor:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _norm_axis(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _keep_shape(shape: tuple, axes: tuple) -> tuple:
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


# ---------------------------------------------------------------------------
# Elementwise binary ops
# ---------------------------------------------------------------------------
class Add(Function):
    differentiable_twice = True

    def forward(self, a, b):
        _check_suffix("add", a.shape, b.shape)
        return a + b

    def backward(self, g):
        a, b = self.parents
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    def backward_graph(self, g):
        a, b = self.parents
        return _unbroadcast_t(g, a.shape), _unbroadcast_t(g, b.shape)


class Sub(Function):
    differentiable_twice = True

    def forward(self, a, b):
        _check_suffix("sub", a.shape, b.shape)
        return a - b

    def backward(self, g):
        a, b = self.parents
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    def backward_graph(self, g):
        a, b = self.parents
        return _unbroadcast_t(g, a.shape), -_unbroadcast_t(g, b.shape)


class Mul(Function):
    differentiable_twice = True

    def forward(self, a, b):
        _check_suffix("mul", a.shape, b.shape)
        return a * b

    def backward(self, g):
        a, b = self.parents
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    def backward_graph(self, g):
        a, b = self.parents
        ga = _unbroadcast_t(g * b, a.shape) if a.requires_grad else None
        gb = _unbroadcast_t(g * a, b.shape) if b.requires_grad else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        _check_suffix("div", a.shape, b.shape)
        return a / b

    def backward(self, g):
        a, b = self.parents
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb


class Neg(Function):
    differentiable_twice = True

    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)

    def backward_graph(self, g):
        return (-g,)


class Pow(Function):
    def forward(self, a):
        return a ** self.p

    def backward(self, g):
        (a,) = self.parents
        return (g * self.p * a.data ** (self.p - 1),)


def where(cond, a: Tensor, b: Tensor) -> Tensor:
    """Select elementwise between two same-shape tensors with a constant mask."""
    return Where.apply(as_tensor(a), as_tensor(b), cond=np.asarray(cond, dtype=bool))


class Where(Function):
    def forward(self, a, b):
        if a.shape != b.shape or self.cond.shape != a.shape:
            raise ShapeError(f"where: shapes {self.cond.shape}, {a.shape}, {b.shape} must match")
        return np.where(self.cond, a, b)

    def backward(self, g):
        zero = np.zeros_like(g)
        return np.where(self.cond, g, zero), np.where(self.cond, zero, g)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------
class MatMul(Function):
    """``a @ b`` with either a shared 2-D right operand or equal batch dims."""

    differentiable_twice = True

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        return a @ b

    def backward(self, g):
        a, b = self.parents
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    def backward_graph(self, g):
        a, b = self.parents
        ga = gb = None
        if a.requires_grad:
            ga = g @ b.swap_last()
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.reshape(-1, k).transpose() @ g.reshape(-1, n)
            else:
                gb = a.swap_last() @ g
        return ga, gb


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w + b``.

    Two layouts are accepted: a shared layer (``w`` is ``(in, out)``, ``b`` is
    ``(out,)``, ``x`` is ``(..., in)``) and a stack of independent layers
    (``w`` is ``(N, in, out)``, ``b`` is ``(N, out)``, ``x`` is ``(N, M, in)``).
    """
    if b is None:
        b = Tensor(np.zeros(w.shape[:-2] + w.shape[-1:], dtype=w.dtype))
    return Linear.apply(x, w, b)


class Linear(Function):
    differentiable_twice = True

    def forward(self, x, w, b):
        if w.ndim == 2:
            if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
                raise ShapeError(f"linear: x {x.shape}, w {w.shape}, b {b.shape} do not conform")
            return x @ w + b
        if w.ndim == 3:
            if x.ndim != 3 or x.shape[0] != w.shape[0] or x.shape[2] != w.shape[1] or b.shape != (w.shape[0], w.shape[2]):
                raise ShapeError(f"linear: x {x.shape}, w {w.shape}, b {b.shape} do not conform")
            out = x @ w
            out += b[:, None, :]
            return out
        raise ShapeError(f"linear: weight must be 2-D or 3-D, got {w.shape}")

    def backward(self, g):
        x, w, b = self.parents
        gx = gw = gb = None
        if x.requires_grad:
            gx = g @ np.swapaxes(w.data, -1, -2)
        if w.ndim == 2:
            n_in, n_out = w.shape
            if w.requires_grad:
                gw = x.data.reshape(-1, n_in).T @ g.reshape(-1, n_out)
            if b.requires_grad:
                gb = g.reshape(-1, n_out).sum(axis=0)
        else:
            if w.requires_grad:
                gw = np.swapaxes(x.data, 1, 2) @ g
            if b.requires_grad:
                gb = g.sum(axis=1)
        return gx, gw, gb

    def backward_graph(self, g):
        x, w, b = self.parents
        if w.ndim != 2:
            raise DoubleBackwardError("op Linear (stacked layout) is not differentiable twice")
        n_in, n_out = w.shape
        gx = g @ w.transpose() if x.requires_grad else None
        gw = x.reshape(-1, n_in).transpose() @ g.reshape(-1, n_out) if w.requires_grad else None
        gb = g.reshape(-1, n_out).sum(axis=0) if b.requires_grad else None
        return gx, gw, gb


# ---------------------------------------------------------------------------
# Elementwise unary ops
# ---------------------------------------------------------------------------
class Sin(Function):
    def forward(self, a):
        if self.omega == 1.0:
            return np.sin(a)
        return np.sin(self.omega * a)

    def backward(self, g):
        (a,) = self.parents
        if self.omega == 1.0:
            return (g * np.cos(a.data),)
        return (g * (self.omega * np.cos(self.omega * a.data)),)


class Cos(Function):
    def forward(self, a):
        return np.cos(a)

    def backward(self, g):
        (a,) = self.parents
        return (-g * np.sin(a.data),)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


class Log(Function):
    def forward(self, a):
        return np.log(a)

    def backward(self, g):
        (a,) = self.parents
        return (g / a.data,)


class Sqrt(Function):
    def forward(self, a):
        self.out = np.sqrt(a)
        return self.out

    def backward(self, g):
        return (g * 0.5 / self.out,)


class Abs(Function):
    def forward(self, a):
        return np.abs(a)

    def backward(self, g):
        (a,) = self.parents
        return (g * np.sign(a.data),)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


class Sigmoid(Function):
    def forward(self, a):
        self.out = _sigmoid(a)
        return self.out

    def backward(self, g):
        s = self.out
        return (g * s * (1.0 - s),)


class Relu(Function):
    def forward(self, a):
        return np.maximum(a, 0)

    def backward(self, g):
        (a,) = self.parents
        return (g * (a.data > 0),)


class LeakyRelu(Function):
    differentiable_twice = True

    def forward(self, a):
        self.slope_mask = np.where(a > 0, 1.0, self.slope).astype(a.dtype)
        return a * self.slope_mask

    def backward(self, g):
        return (g * self.slope_mask,)

    def backward_graph(self, g):
        return (g * Tensor(self.slope_mask),)


class Clip(Function):
    """Clamp with the gradient passed through only where the input is in range."""

    def forward(self, a):
        return np.clip(a, self.lo, self.hi)

    def backward(self, g):
        (a,) = self.parents
        return (g * ((a.data >= self.lo) & (a.data <= self.hi)),)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------
class Sum(Function):
    differentiable_twice = True

    def forward(self, a):
        self.axes = _norm_axis(self.axis, a.ndim)
        return a.sum(axis=self.axes, keepdims=self.keepdims)

    def backward(self, g):
        (a,) = self.parents
        return (np.broadcast_to(g.reshape(_keep_shape(a.shape, self.axes)), a.shape),)

    def backward_graph(self, g):
        (a,) = self.parents
        return (g.reshape(_keep_shape(a.shape, self.axes)).broadcast_to(a.shape),)


class Mean(Function):
    differentiable_twice = True

    def forward(self, a):
        self.axes = _norm_axis(self.axis, a.ndim)
        self.count = int(np.prod([a.shape[i] for i in self.axes])) if self.axes else 1
        return a.mean(axis=self.axes, keepdims=self.keepdims)

    def backward(self, g):
        (a,) = self.parents
        return (np.broadcast_to(g.reshape(_keep_shape(a.shape, self.axes)) / self.count, a.shape),)

    def backward_graph(self, g):
        (a,) = self.parents
        return ((g * (1.0 / self.count)).reshape(_keep_shape(a.shape, self.axes)).broadcast_to(a.shape),)


def _first_argmax_mask(a: np.ndarray, axes: tuple) -> np.ndarray:
    """One-hot of the first maximal element over ``axes`` (ties go to the lowest index)."""
    keep = _keep_shape(a.shape, axes)
    moved = np.moveaxis(a, axes, tuple(range(a.ndim - len(axes), a.ndim)))
    flat = moved.reshape(moved.shape[: a.ndim - len(axes)] + (-1,))
    idx = flat.argmax(axis=-1)
    onehot = np.zeros_like(flat)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    onehot = onehot.reshape(moved.shape)
    onehot = np.moveaxis(onehot, tuple(range(a.ndim - len(axes), a.ndim)), axes)
    assert onehot.shape == a.shape and keep is not None
    return onehot


class Max(Function):
    differentiable_twice = True

    def forward(self, a):
        self.axes = _norm_axis(self.axis, a.ndim)
        self.mask = _first_argmax_mask(a, self.axes)
        return a.max(axis=self.axes, keepdims=self.keepdims)

    def backward(self, g):
        (a,) = self.parents
        return (g.reshape(_keep_shape(a.shape, self.axes)) * self.mask,)

    def backward_graph(self, g):
        (a,) = self.parents
        expanded = g.reshape(_keep_shape(a.shape, self.axes)).broadcast_to(a.shape)
        return (expanded * Tensor(self.mask),)


class LogSumExp(Function):
    def forward(self, a):
        self.axes = _norm_axis(self.axis, a.ndim)
        m = a.max(axis=self.axes, keepdims=True)
        e = np.exp(a - m)
        s = e.sum(axis=self.axes, keepdims=True)
        self.soft = e / s
        out = np.log(s) + m
        if not self.keepdims:
            out = out.reshape([d for i, d in enumerate(a.shape) if i not in self.axes])
        return out

    def backward(self, g):
        (a,) = self.parents
        return (g.reshape(_keep_shape(a.shape, self.axes)) * self.soft,)


class Norm(Function):
    """Euclidean norm; the subgradient at the origin is taken as zero."""

    def forward(self, a):
        self.axes = _norm_axis(self.axis, a.ndim)
        self.out = np.sqrt((a * a).sum(axis=self.axes, keepdims=True))
        if self.keepdims:
            return self.out
        return self.out.reshape([d for i, d in enumerate(a.shape) if i not in self.axes])

    def backward(self, g):
        (a,) = self.parents
        n = self.out
        safe = np.where(n > 0, n, 1.0)
        scale = np.where(n > 0, 1.0 / safe, 0.0)
        return (g.reshape(n.shape) * a.data * scale,)


class Std(Function):
    """Standard deviation along ``axis`` (batch statistics)."""

    def forward(self, a):
        self.axes = _norm_axis(self.axis, a.ndim)
        n = int(np.prod([a.shape[i] for i in self.axes]))
        if n - self.ddof <= 0:
            raise ShapeError(f"std: need more than {self.ddof} samples along axis {self.axis}, got {n}")
        self.n = n
        self.centered = a - a.mean(axis=self.axes, keepdims=True)
        var = (self.centered ** 2).sum(axis=self.axes, keepdims=True) / (n - self.ddof)
        self.out = np.sqrt(var)
        if self.keepdims:
            return self.out
        return self.out.reshape([d for i, d in enumerate(a.shape) if i not in self.axes])

    def backward(self, g):
        s = self.out
        scale = np.where(s > 0, 1.0 / np.where(s > 0, s, 1.0), 0.0) / (self.n - self.ddof)
        return (g.reshape(s.shape) * self.centered * scale,)


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------
class Reshape(Function):
    differentiable_twice = True

    def forward(self, a):
        try:
            return a.reshape(self.shape)
        except ValueError as exc:
            raise ShapeError(f"reshape: cannot reshape {a.shape} to {self.shape}") from exc

    def backward(self, g):
        return (g.reshape(self.parents[0].shape),)

    def backward_graph(self, g):
        return (g.reshape(self.parents[0].shape),)


class Transpose(Function):
    differentiable_twice = True

    def forward(self, a):
        self.inverse = tuple(np.argsort(self.axes))
        return np.transpose(a, self.axes)

    def backward(self, g):
        return (np.transpose(g, self.inverse),)

    def backward_graph(self, g):
        return (g.transpose(self.inverse),)


def broadcast_to(x: Tensor, shape) -> Tensor:
    return BroadcastTo.apply(as_tensor(x), shape=tuple(shape))


class BroadcastTo(Function):
    differentiable_twice = True

    def forward(self, a):
        try:
            out = np.broadcast_to(a, self.shape)
        except ValueError as exc:
            raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {self.shape}") from exc
        lead = len(self.shape) - a.ndim
        self.lead = tuple(range(lead))
        self.expanded = tuple(i + lead for i, d in enumerate(a.shape) if d == 1 and self.shape[i + lead] != 1)
        return np.ascontiguousarray(out)

    def backward(self, g):
        (a,) = self.parents
        out = g.sum(axis=self.lead + self.expanded, keepdims=True)
        return (out.reshape(a.shape),)

    def backward_graph(self, g):
        (a,) = self.parents
        axes = self.lead + self.expanded
        out = g.sum(axis=axes, keepdims=True) if axes else g
        return (out.reshape(a.shape),)


class GetItem(Function):
    differentiable_twice = True

    def forward(self, a):
        return np.asarray(a[self.index])

    def backward(self, g):
        (a,) = self.parents
        out = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(out, self.index, g)
        return (out,)

    def backward_graph(self, g):
        (a,) = self.parents
        return (ScatterAdd.apply(g, index=self.index, shape=a.shape),)


class ScatterAdd(Function):
    """Adjoint of indexing: place ``g`` into zeros of ``shape`` at ``index``."""

    differentiable_twice = True

    def forward(self, g):
        out = np.zeros(self.shape, dtype=g.dtype)
        np.add.at(out, self.index, g)
        return out

    def backward(self, g):
        return (np.asarray(g[self.index]),)

    def backward_graph(self, g):
        return (g[self.index],)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return Concat.apply(*tensors, axis=axis)


class Concat(Function):
    differentiable_twice = True

    def forward(self, *arrays):
        ref = arrays[0]
        ax = self.axis % ref.ndim
        for a in arrays[1:]:
            if a.ndim != ref.ndim or any(a.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
                raise ShapeError(f"concat: incompatible shapes {ref.shape} and {a.shape} along axis {self.axis}")
        self.ax = ax
        self.bounds = np.cumsum([0] + [a.shape[ax] for a in arrays])
        return np.concatenate(arrays, axis=ax)

    def _slices(self, i: int, ndim: int):
        idx = [slice(None)] * ndim
        idx[self.ax] = slice(int(self.bounds[i]), int(self.bounds[i + 1]))
        return tuple(idx)

    def backward(self, g):
        return tuple(g[self._slices(i, g.ndim)] if p.requires_grad else None for i, p in enumerate(self.parents))

    def backward_graph(self, g):
        return tuple(g[self._slices(i, g.ndim)] if p.requires_grad else None for i, p in enumerate(self.parents))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack: need at least one tensor")
    ndim = tensors[0].ndim + 1
    ax = axis % ndim
    expanded = [t.reshape(t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors]
    return concat(expanded, axis=ax)


# ---------------------------------------------------------------------------
# Graph traversal
# ---------------------------------------------------------------------------
def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        if node._ctx is not None:
            for p in node._ctx.parents:
                if p.requires_grad and id(p) not in seen:
                    stack_.append((p, False))
    return order


def backward(loss: Tensor, leaves: Sequence[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    ``leaves``, when given, are zero-filled first so that leaves the loss does
    not reach end up holding an explicit zero gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if leaves is not None:
        for leaf in leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        fn = node._ctx
        if fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, gp in zip(fn.parents, fn.backward(g)):
            if gp is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = gp


def grad(
    output: Tensor,
    inputs: Sequence[Tensor],
    grad_output: Tensor | np.ndarray | None = None,
    create_graph: bool = False,
) -> list:
    """Gradients of ``output`` with respect to ``inputs`` without touching ``.grad``.

    With ``create_graph=True`` the returned tensors are themselves part of a
    graph and can be differentiated again. Unreached inputs get zeros.
    """
    inputs = list(inputs)
    if grad_output is None:
        if output.size != 1:
            raise ShapeError(f"grad: output must be scalar without grad_output, got shape {output.shape}")
        seed = np.ones_like(output.data)
    else:
        seed = grad_output.data if isinstance(grad_output, Tensor) else np.asarray(grad_output, dtype=output.dtype)
    input_ids = {id(t) for t in inputs}
    results: dict[int, object] = {}
    if output.requires_grad:
        order = _toposort(output)
        relevant: set[int] = set()
        for node in order:
            if id(node) in input_ids:
                relevant.add(id(node))
            elif node._ctx is not None and any(id(p) in relevant for p in node._ctx.parents):
                relevant.add(id(node))
        grads: dict[int, object] = {}
        if id(output) in relevant:
            grads[id(output)] = Tensor(seed) if create_graph else seed
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in input_ids:
                results[id(node)] = g
                continue
            fn = node._ctx
            if fn is None:
                continue
            if create_graph:
                if not fn.differentiable_twice:
                    fn.backward_graph(g)  # raises DoubleBackwardError
                pgs = fn.backward_graph(g)
            else:
                pgs = fn.backward(g)
            for parent, gp in zip(fn.parents, pgs):
                if gp is None or id(parent) not in relevant:
                    continue
                key = id(parent)
                grads[key] = grads[key] + gp if key in grads else gp
    out = []
    for t in inputs:
        g = results.get(id(t))
        if g is None:
            g = np.zeros_like(t.data)
            g = Tensor(g) if create_graph else g
        elif not create_graph and isinstance(g, Tensor):
            g = g.data
        out.append(g)
    return out


def input_gradient_penalty(disc: Callable[[Tensor], Tensor], x_hat: Tensor) -> Tensor:
    """``(||grad_x D(x)|| - 1)^2`` evaluated at ``x_hat``.

    ``disc`` may return a scalar or one critic value per leading batch entry; in
    the batched case one penalty per entry is returned, with the norm taken
    over all non-batch axes. The result stays differentiable with respect to
    the critic's parameters through an exact double backward.
    """
    x = Tensor(x_hat.data, requires_grad=True)
    critic = disc(x)
    total = critic if critic.size == 1 else critic.sum()
    (gx,) = grad(total.reshape(()) if total.ndim else total, [x], create_graph=True)
    if critic.size == 1 and critic.ndim <= 1 and x.ndim <= 2:
        norm = gx.norm()
    else:
        norm = gx.norm(axis=tuple(range(1, gx.ndim)))
    return (norm - 1.0) ** 2
