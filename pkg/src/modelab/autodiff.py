"""Dense float64 tensors with reverse-mode differentiation.

Every op builds a node holding its parents and a closure that pushes the
output adjoint back to them. ``Tensor.backward`` walks the graph in reverse
topological order, so each leaf marked ``requires_grad`` accumulates its
gradient exactly once per backward call.

Broadcasting follows numpy; adjoints are summed back to the operand shape.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, DomainError, SingularityError

_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them; results are constants."""
    prev = _recording()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


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


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = ""

    # construction helpers

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence[Tensor], op: str,
                 backward: Callable[[np.ndarray], None]) -> Tensor:
        data = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite value produced by {op}")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        needs = _recording() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        # interior adjoints live here; only leaves keep .grad
        adj: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = adj.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            node._backward(g, adj)  # type: ignore[call-arg]

    # arithmetic

    def __add__(self, other) -> Tensor:
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other) -> Tensor:
        return add(as_tensor(other), neg(self))

    def __mul__(self, other) -> Tensor:
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        return div(self, other)

    def __rtruediv__(self, other) -> Tensor:
        return div(as_tensor(other), self)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __pow__(self, p: float) -> Tensor:
        return power(self, p)

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return tmean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int) -> Tensor:
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self) -> Tensor:
        return self.swapaxes(-1, -2)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, op, fn):
    """Wrap ``fn(g) -> per-parent adjoints`` as a graph backward closure."""

    def backward(g: np.ndarray, adj: dict[int, np.ndarray]) -> None:
        grads = fn(g)
        for p, pg in zip(parents, grads):
            if pg is None or not p.requires_grad:
                continue
            if p._backward is None:
                p._accumulate(pg)
            else:
                pg = _unbroadcast(pg, p.data.shape)
                key = id(p)
                if key in adj:
                    adj[key] = adj[key] + pg
                else:
                    adj[key] = pg

    return Tensor._from_op(data, parents, op, backward)


# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b), "add", lambda g: (g, g))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), "neg", lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b), "mul", lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, (a,), "scale", lambda g: (g * c,))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise SingularityError("division by zero")
    out = a.data / b.data
    return _node(out, (a, b), "div", lambda g: (g / b.data, -g * out / b.data))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    return _node(a.data ** p, (a,), "pow", lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    return _node(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return _node(out, (a,), "sqrt", lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), "relu", lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def fn(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _node(out, (a,), "gelu", fn)


# reductions and shape ops

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _node(out, (a,), "sum", fn)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes]))
    return scale(tsum(a, axes, keepdims), 1.0 / n)


def mean_pool(x: Tensor, axis: int = 1) -> Tensor:
    """Average over the sequence axis (B x L x d -> B x d)."""
    return tmean(x, axis=axis)


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), "transpose",
                 lambda g: (np.transpose(g, inv),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(out, tensors, "stack", fn)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather ``a[idx]`` along the first axis."""
    idx = np.asarray(idx)

    def fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.data[idx], (a,), "take", fn)


# linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands with at least two axes")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), "matmul", fn)


def column_norm(w: Tensor) -> Tensor:
    """Per-column L2 norm over the second-to-last axis: (..., o, i) -> (..., 1, i)."""
    if w.ndim < 2:
        raise DimensionError("column_norm needs a matrix")
    out = np.sqrt(np.sum(w.data * w.data, axis=-2, keepdims=True))

    def fn(g):
        if np.any(out == 0):
            raise SingularityError("zero column in column_norm backward")
        return (g * w.data / out,)

    return _node(out, (w,), "column_norm", fn)


def frobenius_norm(w: Tensor) -> Tensor:
    """L2 norm over the last two axes, keeping them: (..., o, i) -> (..., 1, 1)."""
    out = np.sqrt(np.sum(w.data * w.data, axis=(-2, -1), keepdims=True))

    def fn(g):
        if np.any(out == 0):
            raise SingularityError("zero matrix in frobenius_norm backward")
        return (g * w.data / out,)

    return _node(out, (w,), "frobenius_norm", fn)


def magnitude_direction(v: Tensor, m: Tensor, per_column: bool = True) -> Tensor:
    """Fused ``m * v / ||v||`` over columns (or the whole matrix) of the last two axes."""
    axes = -2 if per_column else (-2, -1)
    n = np.sqrt(np.sum(v.data * v.data, axis=axes, keepdims=True))
    if np.any(n == 0):
        raise SingularityError("zero column in magnitude/direction recomposition")
    d = v.data / n
    out = m.data * d

    def fn(g):
        gd = g * d
        gm = gd if m.requires_grad else None
        gv = None
        if v.requires_grad:
            gv = (m.data / n) * (g - d * gd.sum(axis=axes, keepdims=True))
        return gv, gm

    return _node(out, (v, m), "magnitude_direction", fn)


# normalizations and losses

def softmax(x: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)) / temperature,)

    return _node(s, (x,), "softmax", fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    s = np.exp(out)

    def fn(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), "log_softmax", fn)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply optional affine parameters."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gdata = gamma.data if gamma is not None else 1.0
    out = xhat * gdata + (beta.data if beta is not None else 0.0)
    parents = [x] + [p for p in (gamma, beta) if p is not None]

    def fn(g):
        gh = g * gdata
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append(g * xhat)
        if beta is not None:
            grads.append(g)
        return grads

    return _node(out, parents, "layer_norm", fn)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits), in nats."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError("cross_entropy expects logits B x C and labels of length B")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c})")
    labels = labels.astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - z[rows, labels]))

    def fn(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (g * p / n,)

    return _node(np.array(loss), (logits,), "cross_entropy", fn)


def kl_uniform(w: Tensor, atol: float = 1e-8) -> Tensor:
    """Batch mean of KL(w_b || uniform) = sum_i w_i ln(w_i E), with 0 ln 0 = 0."""
    if w.ndim != 2:
        raise DimensionError("kl_uniform expects a B x E matrix")
    wd = w.data
    if np.any(wd < 0) or np.any(np.abs(wd.sum(axis=1) - 1.0) > atol):
        raise DomainError("rows of w must be probability distributions")
    n, e = wd.shape
    pos = wd > 0
    logs = np.zeros_like(wd)
    logs[pos] = np.log(wd[pos] * e)
    val = float(np.sum(wd * logs) / n)

    def fn(g):
        return (g * np.where(pos, logs + 1.0, 0.0) / n,)

    return _node(np.array(val), (w,), "kl_uniform", fn)


def parameters_with_grad(params: Iterable[Tensor]) -> list[Tensor]:
    return [p for p in params if p.requires_grad]


mean = tmean
