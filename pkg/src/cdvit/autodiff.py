"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value in the computation graph is a `Tensor` wrapping a row-major
numpy float64 array. Operations record their inputs and a vector-Jacobian
product; `backward` walks reachable nodes in reverse creation order, which
is a valid reverse topological order and makes gradient accumulation
deterministic.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import ShapeError

_GRAD_ENABLED = [True]
_NODE_COUNTER = itertools.count()

_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (e.g. teacher forward)."""
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED[0]


class Tensor:
    """A node in the computation graph: value, gradient buffer, parents.

    `grad` always matches the shape of `data`. Leaf tensors created with
    requires_grad=True get a zero buffer immediately; interior nodes
    allocate theirs lazily during the backward pass. Constants carry None.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._node_id = next(_NODE_COUNTER)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all graph building goes through the module functions
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def swapaxes(self, a: int, b: int):
        perm = list(range(self.ndim))
        perm[a], perm[b] = perm[b], perm[a]
        return transpose(self, tuple(perm))

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / linear algebra primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (_unbroadcast(g, a.data.shape) if na else None,
                _unbroadcast(g, b.data.shape) if nb else None)

    return _node(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (_unbroadcast(g, a.data.shape) if na else None,
                _unbroadcast(-g, b.data.shape) if nb else None)

    return _node(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape) if na else None,
                _unbroadcast(g * a.data, b.data.shape) if nb else None)

    return _node(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if na else None
        gb = (_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
              if nb else None)
        return ga, gb

    return _node(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    na, nb = a.requires_grad, b.requires_grad

    if b.ndim == 2 and a.ndim > 2:
        # linear-layer case: one large GEMM instead of a loop of tiny ones
        k, n = b.data.shape
        lead = a.data.shape[:-1]
        a2 = np.ascontiguousarray(a.data).reshape(-1, k)
        out = (a2 @ b.data).reshape(lead + (n,))

        def vjp(g):
            g2 = np.ascontiguousarray(g).reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.data.shape) if na else None
            gb = a2.T @ g2 if nb else None
            return ga, gb

        return _node(out, (a, b), vjp)

    out = a.data @ b.data

    def vjp(g):
        ga = (_unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
              if na else None)
        gb = (_unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
              if nb else None)
        return ga, gb

    return _node(out, (a, b), vjp)


def affine(x, w, b) -> Tensor:
    """Fused x @ w + b for a 2-d weight and 1-d bias (a linear layer)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2 or b.ndim != 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"affine expects (.., K) @ (K, N) + (N,), got "
                         f"{x.shape}, {w.shape}, {b.shape}")
    k, n = w.data.shape
    lead = x.data.shape[:-1]
    x2 = np.ascontiguousarray(x.data).reshape(-1, k)
    out = (x2 @ w.data + b.data).reshape(lead + (n,))
    nx, nw, nb_ = x.requires_grad, w.requires_grad, b.requires_grad

    def vjp(g):
        g2 = np.ascontiguousarray(g).reshape(-1, n)
        gx = (g2 @ w.data.T).reshape(x.data.shape) if nx else None
        gw = x2.T @ g2 if nw else None
        gb = g2.sum(axis=0) if nb_ else None
        return gx, gw, gb

    return _node(out, (x, w, b), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _node(out, (a,), vjp)


def transpose(a: Tensor, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return _node(out, (a,), vjp)


def getitem(a: Tensor, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out, copy=True), (a,), vjp)


def concat(parts: Iterable[Tensor], axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(parts), vjp)


def _sum_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _sum_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _node(out, (a,), vjp)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _sum_axes(axis, a.ndim)
    count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return tensor_sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def sorted_sum(a: Tensor, axis: int = 0) -> Tensor:
    """Sum along `axis` after sorting values, so that the result depends
    only on the multiset of summands and not on their order.

    Gradient is identical to a plain sum.
    """
    a = as_tensor(a)
    ax = axis % a.ndim
    out = np.sort(a.data, axis=ax).sum(axis=ax)

    def vjp(g):
        g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _node(out, (a,), vjp)


# ---------------------------------------------------------------------------
# nonlinearities and normalizations


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * (0.5 / out),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def vjp(g):
        return (g * mask,)

    return _node(out, (a,), vjp)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _node(out, (a,), vjp)


def gelu(a) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    a = as_tensor(a)
    x = a.data
    phi_cdf = ndtr(x)
    out = x * phi_cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (phi_cdf + x * pdf),)

    return _node(out, (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along `axis`; rows sum to 1."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def vjp(g):
        soft = np.exp(out)
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), vjp)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-row normalization over the last axis, then affine transform."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    na = a.requires_grad

    def vjp(g):
        dx = None
        if na:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            dx = inv * (dxhat - m1 - xhat * m2)
        reduce_axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=reduce_axes) if gain.requires_grad else None
        dbias = g.sum(axis=reduce_axes) if bias.requires_grad else None
        return dx, dgain, dbias

    return _node(out, (a, gain, bias), vjp)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Accumulate gradients of `loss` into every reachable graph node.

    Nodes are processed in reverse creation order (a valid reverse
    topological order), so accumulation is deterministic for a fixed graph.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        for p in t._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append(p)

    nodes.sort(key=lambda t: t._node_id, reverse=True)
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += np.ones_like(loss.data)
    for node in nodes:
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if parent.requires_grad and g is not None:
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    samples: int = 20,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients of the scalar `f()` against central
    finite differences on randomly sampled parameter coordinates.

    Returns the maximum relative error, with relative defined as
    |a - n| / max(|a|, |n|, 1e-5); coordinates whose gradient magnitude is
    below 1e-5 compare absolutely, since central differences of a loss of
    size |f| carry roundoff noise of order eps * |f| / (2 * step).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    params = list(params)
    zero_grads(params)
    loss = f()
    backward(loss)

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    worst = 0.0
    for _ in range(samples):
        flat = int(rng.integers(total))
        pi = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
        p = params[pi]
        idx = np.unravel_index(flat - int(starts[pi]), p.data.shape)

        orig = p.data[idx]
        with no_grad():
            p.data[idx] = orig + step
            f_plus = float(f().data)
            p.data[idx] = orig - step
            f_minus = float(f().data)
        p.data[idx] = orig

        numeric = (f_plus - f_minus) / (2.0 * step)
        analytic = float(p.grad[idx])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-5)
        worst = max(worst, err)
    return worst
