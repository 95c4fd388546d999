"""Dense tensors with dynamic-graph reverse-mode differentiation.

Every operation returns a new :class:`Tensor`; when any input requires a
gradient the result remembers its parents and a closure mapping the output
gradient to one gradient per parent. :func:`backward` walks the graph in
reverse topological order.

Broadcasting follows numpy: shapes are aligned on their trailing
dimensions and size-1 (or missing leading) axes are stretched. Gradients of
broadcast operands are summed back to the operand's shape.

Values are stored as 32-bit floats unless another float dtype is selected
with :func:`precision`. Reductions (``sum``, ``mean``, normalisation
statistics) accumulate in 64-bit and are cast back.
"""

from __future__ import annotations

import contextlib
import logging
from collections import Counter
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

_config = {"dtype": np.dtype(np.float32), "eps": 1e-12, "grad_enabled": True}

# Incremented whenever an operand is clamped to the epsilon floor, keyed by op name.
clamp_counts: Counter = Counter()


def get_epsilon() -> float:
    return _config["eps"]


def set_epsilon(eps: float) -> None:
    if not eps > 0:
        raise ContractError(f"epsilon must be positive, got {eps}")
    _config["eps"] = float(eps)


def default_dtype() -> np.dtype:
    return _config["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    prev = _config["dtype"]
    _config["dtype"] = np.dtype(dtype)
    try:
        yield
    finally:
        _config["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _config["grad_enabled"]
    _config["grad_enabled"] = False
    try:
        yield
    finally:
        _config["grad_enabled"] = prev


def _note_clamp(op: str, n: int) -> None:
    if n:
        clamp_counts[op] += int(n)
        logger.debug("%s: %d operand(s) clamped to epsilon floor", op, n)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_config["dtype"] if dtype is None else dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _lift(a, b):
    """Promote a python/numpy operand to a constant tensor matching the other's dtype."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor):
        return Tensor(a, dtype=b.dtype), b
    return Tensor(a), Tensor(b)


def _result(data, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype if isinstance(data, np.ndarray) else None)
    if _config["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


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


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_broadcast("add", a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_broadcast("sub", a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_broadcast("mul", a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    """``a / b`` with denominators of magnitude below epsilon clamped to ±epsilon."""
    a, b = _lift(a, b)
    _check_broadcast("div", a, b)
    eps = _config["eps"]
    small = np.abs(b.data) < eps
    den = b.data
    if small.any():
        _note_clamp("div", small.sum())
        den = np.where(small, np.where(b.data < 0, -eps, eps), b.data).astype(b.dtype)
    out = a.data / den

    def backward(g):
        ga = _unbroadcast(g / den, a.shape)
        gb = -g * out / den
        if small.any():
            gb = np.where(small, 0.0, gb)
        return ga, _unbroadcast(gb.astype(b.dtype, copy=False), b.shape)

    return _result(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def pow(a: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise ContractError("pow supports scalar exponents only")
    p = float(exponent)
    out = a.data ** p
    return _result(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    """Natural log; operands below epsilon are clamped (and receive no gradient)."""
    eps = _config["eps"]
    small = a.data < eps
    x = a.data
    if small.any():
        _note_clamp("log", small.sum())
        x = np.maximum(x, eps).astype(a.dtype)
    out = np.log(x)

    def backward(g):
        gx = g / x
        if small.any():
            gx = np.where(small, 0.0, gx).astype(a.dtype)
        return (gx,)

    return _result(out, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    if (a.data < 0).any():
        _note_clamp("sqrt", (a.data < 0).sum())
    out = np.sqrt(np.maximum(a.data, 0))
    floor = np.sqrt(_config["eps"])
    return _result(out, (a,), lambda g: (g * 0.5 / np.maximum(out, floor),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


# -- reductions and shape ops -------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _result(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = np.mean(a.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape),)

    return _result(np.asarray(out), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _result(out, tensors, backward)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is None or p is Ellipsis or isinstance(p, (slice, int, np.integer)) for p in parts)


def slice_(a: Tensor, index) -> Tensor:
    out = a.data[index]

    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out), (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    out = a.data @ b.data
    return _result(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# -- numerically careful composites ---------------------------------------

def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    s = shifted.sum(axis=axis, keepdims=True, dtype=np.float64)
    out = (np.log(s) + m).astype(a.dtype)
    soft = (shifted / s).astype(a.dtype)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _result(out if keepdims else np.squeeze(out, axis=axis), (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = np.max(a.data, axis=axis, keepdims=True)
    z = a.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True, dtype=np.float64))
    out = (z - lse).astype(a.dtype)
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis))


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    """Scale every slice along ``axis`` to unit Euclidean norm.

    Zero-norm slices are passed through unchanged and counted under
    ``clamp_counts["l2_normalize"]``.
    """
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"l2_normalize: axis {axis} invalid for shape {a.shape}")
    norm = np.sqrt(np.sum(a.data.astype(np.float64) ** 2, axis=axis, keepdims=True))
    zero = norm == 0
    if zero.any():
        _note_clamp("l2_normalize", zero.sum())
        logger.warning("l2_normalize: %d zero-norm slice(s) passed through", int(zero.sum()))
    den = np.where(zero, 1.0, norm)
    out = (a.data / den).astype(a.dtype)

    def backward(g):
        proj = np.sum(g * out, axis=axis, keepdims=True)
        gx = np.where(zero, g, (g - out * proj) / den)
        return (gx.astype(a.dtype),)

    return _result(out, (a,), backward)


def standardize(a: Tensor, axes, eps: float = 1e-5, floor: bool = False) -> Tensor:
    """Zero-mean, unit-variance over ``axes`` (population variance).

    With ``floor=False`` the divisor is ``sqrt(var + eps)`` (normalisation
    layers); with ``floor=True`` it is ``sqrt(max(var, eps))`` and floored
    slices are counted under ``clamp_counts["standardize"]``.
    """
    axes = _norm_axis(axes, a.ndim)
    x = a.data.astype(np.float64)
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    if floor:
        low = var < eps
        if low.any():
            _note_clamp("standardize", low.sum())
        inv = 1.0 / np.sqrt(np.maximum(var, eps))
    else:
        low = None
        inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = y.astype(a.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        gm = g64.mean(axis=axes, keepdims=True)
        gy = (g64 * y).mean(axis=axes, keepdims=True)
        if low is not None and low.any():
            gy = np.where(low, 0.0, gy)
        return ((inv * (g64 - gm - y * gy)).astype(a.dtype),)

    return _result(out, (a,), backward)


# -- convolutional building blocks ---------------------------------------

def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (N,C,H,W) with ``w`` (O,C,kh,kw)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    p, s = padding, stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    # columns ordered (kh, kw, C) so the gradient scatter below works on contiguous channel rows
    cols = win.transpose(0, 2, 3, 4, 5, 1).reshape(n * ho * wo, kh * kw * c)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, kh, kw, c)
            hp, wp = xp.shape[2], xp.shape[3]
            gxp = np.zeros((n, hp, wp, c), dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + s * ho:s, j:j + s * wo:s, :] += dcols[:, :, :, i, j, :]
            gx = gxp[:, p:p + h, p:p + wd, :].transpose(0, 3, 1, 2)
        return gx, gw

    return _result(np.ascontiguousarray(out), (x, w), backward)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size``×``size`` max pooling; ties route gradient to the first maximum."""
    n, c, h, w = x.shape
    if h % size or w % size:
        raise DimensionError(f"max_pool2d: spatial extent {h}x{w} not divisible by {size}")
    ho, wo = h // size, w // size
    blocks = x.data.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, -1)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _result(out, (x,), backward)


# -- graph traversal ------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tracked tensor reachable from ``loss``.

    Gradients accumulate: calling this twice without zeroing adds the second
    pass onto the first.
    """
    if not isinstance(loss, Tensor) or loss.data.ndim != 0:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise ContractError(f"backward() needs a scalar loss, got shape {shape}")
    if not loss.requires_grad:
        raise ContractError("backward(): loss does not depend on any tensor requiring grad")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        g = np.asarray(g, dtype=node.dtype)
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
