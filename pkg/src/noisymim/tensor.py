"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is built eagerly: every operation stores its parent tensors and a
closure that maps the output gradient to per-parent gradients.  Because an
operand always exists before the op that consumes it, creation order is a
topological order, and ``backward`` replays the closures in reverse creation
order, visiting each node exactly once.  That order is fixed, so repeated
backward passes over the same graph are bit-identical.

All math is float64.  Elementwise ops follow numpy broadcasting; gradients
are summed back down to the operand shape.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

_ids = itertools.count()
_grad_enabled = True

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class no_grad:
    """Context manager that skips graph construction for inference passes."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 ndarray plus an optional slot in the gradient graph.

    ``grad`` accumulates additively across backward passes; call
    :func:`zero_grad` between optimizer steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], list[tuple[Tensor, np.ndarray]]] | None = None
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            n = int(np.prod([self.shape[a] for a in axes]))
        return tensor_sum(self, axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, axes)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _from_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# -- elementwise family -------------------------------------------------

def _binary(a, b, forward, grad_a, grad_b) -> Tensor:
    a_t = isinstance(a, Tensor)
    b_t = isinstance(b, Tensor)
    ad = a.data if a_t else np.asarray(a, dtype=np.float64)
    bd = b.data if b_t else np.asarray(b, dtype=np.float64)
    try:
        out = forward(ad, bd)
    except ValueError:
        raise DimensionError(f"operands not broadcastable: {ad.shape} vs {bd.shape}") from None
    parents = []
    if a_t and a.requires_grad:
        parents.append(a)
    if b_t and b.requires_grad:
        parents.append(b)

    def bwd(g):
        pairs = []
        if a_t and a.requires_grad:
            pairs.append((a, _unbroadcast(grad_a(g, ad, bd), ad.shape)))
        if b_t and b.requires_grad:
            pairs.append((b, _unbroadcast(grad_b(g, ad, bd), bd.shape)))
        return pairs

    return _from_op(out, parents, bwd)


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, ad, bd: g, lambda g, ad, bd: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, ad, bd: g, lambda g, ad, bd: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, ad, bd: g * bd, lambda g, ad, bd: g * ad)


def gelu(x: Tensor) -> Tensor:
    """GELU via the tanh approximation 0.5·x·(1 + tanh(√(2/π)(x + 0.044715x³)))."""
    x = as_tensor(x)
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * (xd + _GELU_A * (x2 * xd)))
    out = 0.5 * xd * (1.0 + t)

    def bwd(g):
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * xd * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        return [(x, g * d)]

    return _from_op(out, (x,), bwd)


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log requires strictly positive input")
    out = np.log(x.data)

    def bwd(g):
        return [(x, g / x.data)]

    return _from_op(out, (x,), bwd)


def sqrt(x: Tensor) -> Tensor:
    """Elementwise square root; differentiable for strictly positive input."""
    x = as_tensor(x)
    if np.any(x.data < 0.0):
        raise DomainError("sqrt requires nonnegative input")
    out = np.sqrt(x.data)

    def bwd(g):
        return [(x, g * (0.5 / out))]

    return _from_op(out, (x,), bwd)


# -- linear algebra -----------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product [..,m,k] @ [..,k,n] -> [..,m,n]."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul batch dimensions not broadcastable: {a.shape} vs {b.shape}") from None

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return [(a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape))]

    return _from_op(out, (a, b), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return [(x, (g - dot) * y)]

    return _from_op(y, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-row normalization over the last axis, then affine. Requires eps > 0."""
    x = as_tensor(x)
    gain = as_tensor(gain)
    bias = as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        pairs = []
        if gain.requires_grad:
            pairs.append((gain, _unbroadcast(g * xhat, gain.shape)))
        if bias.requires_grad:
            pairs.append((bias, _unbroadcast(g, bias.shape)))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            pairs.append((x, inv * (dxhat - m1 - xhat * m2)))
        return pairs

    return _from_op(out, (x, gain, bias), bwd)


# -- shape ops ----------------------------------------------------------

def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return [(x, np.broadcast_to(g, x.shape).copy() if np.ndim(g) else np.full(x.shape, g))]
        g_arr = np.asarray(g)
        if not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(a % x.ndim for a in axes)
            for a in sorted(axes):
                g_arr = np.expand_dims(g_arr, a)
        return [(x, np.broadcast_to(g_arr, x.shape).copy())]

    return _from_op(out, (x,), bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def bwd(g):
        return [(x, g.reshape(x.shape))]

    return _from_op(out, (x,), bwd)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)

    def bwd(g):
        return [(x, g.transpose(inv))]

    return _from_op(out, (x,), bwd)


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    out = np.broadcast_to(x.data, shape)

    def bwd(g):
        return [(x, _unbroadcast(g, x.shape))]

    return _from_op(out, (x,), bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` entries starting at `start` along `axis`."""
    x = as_tensor(x)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = x.data[idx]

    def bwd(g):
        full = np.zeros(x.shape)
        full[idx] = g
        return [(x, full)]

    return _from_op(out, (x,), bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pairs = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            pairs.append((p, g[tuple(idx)]))
        return pairs

    return _from_op(out, parts, bwd)


# -- backward pass ------------------------------------------------------

def backward(loss: Tensor, leaves: Sequence[Tensor] | None = None) -> dict[Tensor, np.ndarray] | None:
    """Reverse-mode sweep from a scalar loss.

    Accumulates into ``.grad`` of every reachable tensor with
    ``requires_grad``.  When ``leaves`` is given, returns {leaf: grad},
    filling zeros for leaves the loss does not reach.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    nodes: list[Tensor] = []
    seen = {id(loss)}
    stack = [loss]
    while stack:
        t = stack.pop()
        nodes.append(t)
        for p in t._parents:
            if id(p) not in seen:
                seen.add(id(p))
                stack.append(p)
    nodes.sort(key=lambda t: t._id, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for t in nodes:
        g = grads.pop(id(t), None)
        if g is None or not t.requires_grad:
            continue
        t.grad = g if t.grad is None else t.grad + g
        if t._backward is None:
            continue
        for parent, pg in t._backward(g):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    if leaves is None:
        return None
    result = {}
    for leaf in leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros(leaf.shape)
        result[leaf] = leaf.grad
    return result


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must be a pure scalar-valued function of its tensor argument; it is
    re-evaluated 2·size(x) times, so keep x small.  eps should sit in
    [1e-8, 1e-4] for float64.
    """
    base = np.array(x.data, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ContractError("grad_check requires a scalar-valued function")
    backward(out)
    analytic = leaf.grad.copy()

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(base.reshape(base.shape))).item()
        flat[i] = orig - eps
        lo = f(Tensor(base.reshape(base.shape))).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))
