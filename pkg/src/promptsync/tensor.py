"""Dense float64 tensors with a reverse-mode gradient tape.

Operations record themselves on the active :class:`Tape` whenever at least
one input requires a gradient. Outside a tape every operation is a plain
numpy computation and its result is a constant.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> backward(y, tape)[x]
    array([6.])
"""
from __future__ import annotations

import threading
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import kernels
from .errors import NumericDomainError, ShapeError

DOMAIN_EPS = 1e-12

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Node(NamedTuple):
    op: str
    inputs: tuple
    backward: Callable


class Tape:
    """Ordered record of differentiable operations.

    Node ids are list positions, so inputs always precede outputs.
    A tape is meant for a single forward/backward pass and then dropped.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, data: np.ndarray, inputs: tuple, bwd: Callable) -> "Tensor":
        for t in inputs:
            if t._tape is not None and t._tape is not self:
                raise ValueError(f"{op}: input was produced on a different tape")
        out = Tensor._wrap(data, requires_grad=True)
        out._tape = self
        out._node = len(self.nodes)
        self.nodes.append(Node(op, inputs, bwd))
        return out


class Tensor:
    """Immutable float64 array, optionally a gradient leaf or a tape node."""

    __slots__ = ("data", "requires_grad", "_tape", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._tape = None
        self._node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t._tape = None
        t._node = None
        return t

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
    def node(self) -> int | None:
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

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

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _emit(op: str, data: np.ndarray, inputs: tuple, bwd: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        return tape.record(op, data, inputs, bwd)
    return Tensor._wrap(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericDomainError(f"{op}: non-finite input")


# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if np.any(np.abs(bd) < DOMAIN_EPS):
        raise NumericDomainError("div: denominator within 1e-12 of zero")
    out = ad / bd
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def power(a, k: float) -> Tensor:
    """``a ** k`` for a constant exponent."""
    a = as_tensor(a)
    ad = a.data
    return _emit("power", ad ** k, (a,), lambda g: (g * k * ad ** (k - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if np.any(ad < DOMAIN_EPS):
        raise NumericDomainError("log: argument below 1e-12")
    return _emit("log", np.log(ad), (a,), lambda g: (g / ad,))


def xlogx(a) -> Tensor:
    """Elementwise ``x * log(x)`` with ``0 * log 0 = 0``; negative input is rejected."""
    a = as_tensor(a)
    ad = a.data
    if np.any(ad < 0):
        raise NumericDomainError("xlogx: negative argument")
    pos = ad > 0
    safe = np.where(pos, ad, 1.0)
    out = np.where(pos, ad * np.log(safe), 0.0)
    return _emit("xlogx", out, (a,), lambda g: (np.where(pos, g * (np.log(safe) + 1.0), 0.0),))


def maximum(a, floor: float) -> Tensor:
    """Clamp below at ``floor``; gradient flows only where ``a > floor``."""
    a = as_tensor(a)
    ad = a.data
    keep = ad > floor
    return _emit("maximum", np.where(keep, ad, floor), (a,), lambda g: (np.where(keep, g, 0.0),))


def gelu(a) -> Tensor:
    """tanh-approximated GELU."""
    a = as_tensor(a)
    x2 = np.ascontiguousarray(a.data.reshape(-1, a.shape[-1] if a.ndim else 1))
    y, t = kernels.gelu_fwd(x2)
    return _emit("gelu", y.reshape(a.shape), (a,),
                 lambda g: (kernels.gelu_bwd(np.ascontiguousarray(g.reshape(x2.shape)), x2, t).reshape(a.shape),))


# reductions and shape manipulation


def tensor_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _emit("sum", np.asarray(out), (a,), bwd)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    count = a.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))
    out = np.mean(a.data, axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return _emit("mean", np.asarray(out), (a,), bwd)


def squared_norm(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit("squared_norm", np.sum(ad * ad, axis=axis), (a,),
                 lambda g: (2.0 * np.expand_dims(g, axis) * ad,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _emit("broadcast_to", np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, old),))


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic(index)

    def bwd(g):
        out = np.zeros(shape)
        if basic:
            out[index] += g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _emit("getitem", np.asarray(a.data[index]), (a,), bwd)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)
    return _emit("concat", out, ts, lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    out = np.stack([t.data for t in ts], axis=axis)
    n = len(ts)
    return _emit("stack", out, ts,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# linear algebra and fused layers


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul: both operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), bwd)


def softmax(logits, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Tempered softmax ``exp(x_i / T) / sum_j exp(x_j / T)`` along ``axis``."""
    x = as_tensor(logits)
    if not temperature > 0:
        raise NumericDomainError("softmax: temperature must be positive")
    _check_finite("softmax", x.data)
    moved = np.moveaxis(x.data, axis, -1)
    flat = np.ascontiguousarray(moved.reshape(-1, moved.shape[-1]))
    inv_t = 1.0 / temperature
    y2 = kernels.softmax_fwd(flat, inv_t)
    out = np.moveaxis(y2.reshape(moved.shape), -1, axis)

    def bwd(g):
        g2 = np.ascontiguousarray(np.moveaxis(g, axis, -1).reshape(flat.shape))
        return (np.moveaxis(kernels.softmax_bwd(g2, y2, inv_t).reshape(moved.shape), -1, axis),)

    return _emit("softmax", out, (x,), bwd)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    y, xhat, rstd = kernels.layer_norm_fwd(x2, gamma.data, beta.data, eps)

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(-1, d))
        dx, dgamma, dbeta = kernels.layer_norm_bwd(g2, xhat, rstd, gamma.data)
        return dx.reshape(x.shape), dgamma, dbeta

    return _emit("layer_norm", y.reshape(x.shape), (x, gamma, beta), bwd)


def _norms(op: str, ad: np.ndarray, axis: int) -> np.ndarray:
    n = np.sqrt(np.sum(ad * ad, axis=axis, keepdims=True))
    if np.any(n < DOMAIN_EPS):
        raise NumericDomainError(f"{op}: zero-norm input")
    return n


def l2_normalize(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    n = _norms("l2_normalize", a.data, axis)
    y = a.data / n
    return _emit("l2_normalize", y, (a,),
                 lambda g: ((g - y * np.sum(g * y, axis=axis, keepdims=True)) / n,))


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    """Cosine of the angle between ``a`` and ``b`` along ``axis`` (broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    na = _norms("cosine_similarity", a.data, axis)
    nb = _norms("cosine_similarity", b.data, axis)
    ua, ub = a.data / na, b.data / nb
    cos = np.sum(ua * ub, axis=axis, keepdims=True)
    out = np.clip(np.squeeze(cos, axis=axis), -1.0, 1.0)

    def bwd(g):
        g = np.expand_dims(g, axis)
        ga = _unbroadcast(g * (ub - cos * ua) / na, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * (ua - cos * ub) / nb, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("cosine_similarity", out, (a, b), bwd)


# reverse pass


def backward(loss: Tensor, tape: Tape | None = None) -> dict:
    """Gradients of scalar ``loss`` for every reachable leaf with ``requires_grad``.

    Returns a dict keyed by leaf tensor. Intermediate gradients are freed
    as soon as they have been propagated.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss._node is None:
        return {loss: np.ones(loss.shape)} if loss.requires_grad else {}
    tape = tape if tape is not None else loss._tape
    if loss._tape is not tape:
        raise ValueError("backward: loss was not produced on this tape")
    grads = {loss._node: np.ones(loss.shape)}
    leaves: dict = {}
    nodes = tape.nodes
    for i in range(loss._node, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        node = nodes[i]
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._node is not None:
                prev = grads.get(t._node)
                grads[t._node] = gi if prev is None else prev + gi
            else:
                prev = leaves.get(t)
                leaves[t] = np.array(gi, dtype=np.float64) if prev is None else prev + gi
    return leaves


def value_and_grad(f: Callable, *params: Tensor):
    """Evaluate ``f(*params)`` on a fresh tape and return ``(value, [grads])``."""
    with Tape() as tape:
        out = f(*params)
    g = backward(out, tape)
    return float(out.data), [g.get(p, np.zeros(p.shape)) for p in params]


def finite_diff_grad(f: Callable, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (test oracle)."""
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(as_tensor(f(Tensor(base))).data)
        flat[i] = orig - h
        fm = float(as_tensor(f(Tensor(base))).data)
        flat[i] = orig
        grad.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative difference, 0 when both are exactly zero."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)
