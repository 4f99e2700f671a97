"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a backward rule. :func:`backward` orders the graph into a
:class:`Tape` (parents before children) and walks it in reverse.

Gradients accumulate with ``+=``; callers zero them between micro-batches.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "UndefinedMeanError",
    "Tensor",
    "Tape",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concatenate",
    "embedding",
    "gelu",
    "sigmoid",
    "softmax",
    "masked_fill",
    "dropout",
    "rms_norm",
    "softmax_cross_entropy",
]

class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class UndefinedMeanError(ValueError):
    """Raised when a mean is requested over zero elements."""


_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


def _as_array(x, dtype=None) -> np.ndarray:
    arr = np.asarray(x)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """A dense array with an optional gradient slot.

    ``data`` is a C-contiguous numpy array (float64 unless float32 is
    requested). ``grad`` is ``None`` until a backward pass reaches the tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.ascontiguousarray(_as_array(data, dtype))
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # ------------------------------------------------------------------ info
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

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def backward(self) -> None:
        backward(self)

    # ------------------------------------------------------------- operators
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], rule, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------- tape
class Tape:
    """Nodes of a graph in topological order (every input precedes its users)."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def index(self, node: Tensor) -> int:
        for i, n in enumerate(self.nodes):
            if n is node:
                return i
        raise KeyError("tensor is not on this tape")


def backward(loss: Tensor) -> Tape:
    """Populate ``grad`` on every tensor that ``loss`` depends on.

    Gradients are added to any existing ``grad`` (accumulation); the trainer
    is responsible for zeroing them. Returns the tape that was replayed.
    """
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any tensor that requires grad")
    tape = Tape.from_output(loss)
    # intermediate grads live here so that only this pass sees them
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        grads = node._backward(g)
        for parent, pg in zip(node._parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
    return tape


# -------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape

    def rule(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), rule, "add")


def sub(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape

    def rule(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result(a.data - b.data, (a, b), rule, "sub")


def mul(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data

    def rule(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), rule, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    c = x.dtype.type(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g: (-g,), "neg")


# ------------------------------------------------------------------- matmul
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    ``b`` is either a matrix shared across any leading dimensions of ``a``
    (``[..., m, k] @ [k, n]``) or a batch with exactly the leading
    dimensions of ``a`` (``[..., m, k] @ [..., k, n]``).
    """
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if shared:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(out, (a, b), rule, "matmul")


# --------------------------------------------------------------- reductions
def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), rule, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[i] for i in axes]))
    if count == 0:
        raise UndefinedMeanError("mean over zero elements")
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ------------------------------------------------------------------ shaping
def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {src} into {tuple(shape)}") from None
    return _result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _result(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise DimensionError("concatenate needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"cannot concatenate shapes {shapes} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, rule, "concatenate")


def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of ``weight`` at integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range [0, {vocab})")
    wshape = weight.shape

    def rule(g):
        gw = np.zeros(wshape, dtype=g.dtype)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, wshape[-1]))
        return (gw,)

    return _result(weight.data[ids], (weight,), rule, "embedding")


# ------------------------------------------------------------- activations
_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def rule(g):
        d = 0.5 * (1.0 + t) + (0.5 * _GELU_C) * xd * (1.0 - t * t) * (1.0 + 3 * 0.044715 * x2)
        return (g * d,)

    return _result(out, (x,), rule, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def rule(g):
        gx = g - (g * y).sum(axis=axis, keepdims=True)
        gx *= y
        return (gx,)

    return _result(y, (x,), rule, "softmax")


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true (broadcast against ``x``)."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, x.dtype.type(value), x.data)
    return _result(out, (x,), lambda g: (np.where(mask, 0.0, g).astype(g.dtype),), "masked_fill")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout with a mask drawn from ``rng``; identity for rate 0."""
    if rate <= 0.0 or rng is None:
        return x
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """``weight * x / sqrt(mean(x**2, last axis) + eps)``."""
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("rms_norm over an empty last dimension")
    if weight.shape != (d,):
        raise DimensionError(f"rms_norm weight shape {weight.shape} does not match input {x.shape}")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    xd, wd = x.data, weight.data
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * r

    def rule(g):
        gw = (g * xhat).reshape(-1, d).sum(axis=0) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * wd
            gx = r * gh - xhat * (r * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gw

    return _result(xhat * wd, (x, weight), rule, "rms_norm")


# --------------------------------------------------------------------- loss
def softmax_cross_entropy(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood over positions whose target is not ignored.

    ``logits`` has shape ``[..., V]``; ``targets`` matches the leading shape.
    """
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    if tgt.shape[0] != flat.shape[0]:
        raise DimensionError(f"targets shape {np.shape(targets)} does not match logits {logits.shape}")
    active = tgt != ignore_index
    count = int(active.sum())
    if count == 0:
        raise UndefinedMeanError("every target position is ignored")
    live = tgt[active]
    if live.min() < 0 or live.max() >= V:
        raise IndexError(f"target id out of range [0, {V})")
    rows = np.nonzero(active)[0]
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse[rows] - z[rows, live]
    loss = np.asarray(nll.sum() / count, dtype=flat.dtype)
    shape = logits.shape

    def rule(g):
        p = np.exp(z - lse[:, None])
        p[~active] = 0.0
        p[rows, live] -= 1.0
        return ((p * (g / count)).reshape(shape),)

    return _result(loss, (logits,), rule, "cross_entropy")

