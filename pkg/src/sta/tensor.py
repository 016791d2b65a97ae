"""A small dense-tensor engine with reverse-mode automatic differentiation.

Values are float64 numpy arrays. Every op that touches a tensor with
``requires_grad`` records its parents and a backward closure; ``backward``
orders the reachable records by creation id (a valid topological order,
since parents always exist before their children) and walks them once in
reverse.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DomainError, NonFiniteError, ShapeError

LEAKY_SLOPE = 0.2

_ids = itertools.count()
_state = threading.local()


def _recording():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording them."""
    prev = _recording()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.node_id = next(_ids)
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._released = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self * other

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor_create(shape, values, requires_grad=False):
    """Build a tensor from a dimension list and row-major values."""
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"dimensions must be positive, got {shape}")
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size != int(np.prod(shape, dtype=np.int64)):
        raise ShapeError(f"{values.size} values do not fill shape {shape}")
    return Tensor(values.reshape(shape).copy(), requires_grad=requires_grad)


def parameter(data):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data, parents, backward, op):
    """Wrap a forward result; ``backward(g)`` returns one gradient per parent."""
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"op '{op}' produced a non-finite value")
    if _recording() and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward, op)
    return Tensor(data, _op=op)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return make_op(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)), "mul")


def scale(a, s):
    s = float(s)
    return make_op(a.data * s, (a,), lambda g: (g * s,), "scale")


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    return make_op(a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].data.ndim
    ax = axis % nd
    for t in tensors:
        if t.data.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    cuts = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return make_op(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors),
                   lambda g: tuple(np.split(g, cuts, axis=ax)), "concat")


def reshape(a, shape):
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None
    return make_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def rows(a, index):
    """Gather rows of a 2-d tensor (repeats allowed)."""
    index = np.asarray(index, dtype=np.int64)

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return make_op(a.data[index], (a,), back, "rows")


def pick(a, index):
    """Select ``a[i, index[i]]`` for every row i."""
    index = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError(f"pick: need one index per row of {a.shape}")
    r = np.arange(a.shape[0])

    def back(g):
        out = np.zeros_like(a.data)
        out[r, index] = g
        return (out,)

    return make_op(a.data[r, index], (a,), back, "pick")


def leaky_relu(a, slope=LEAKY_SLOPE):
    pos = a.data > 0
    return make_op(np.where(pos, a.data, slope * a.data), (a,),
                   lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def sigmoid(a):
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(a):
    if a.data.ndim == 0 or a.shape[-1] == 0:
        raise DomainError("softmax over an empty axis")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_op(out, (a,), back, "softmax")


def tabs(a):
    sign = np.sign(a.data)
    return make_op(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def square(a):
    return make_op(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def tsum(a, axis=None):
    out = a.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return make_op(out, (a,), back, "sum")


def mean(a, axis=None):
    n = a.data.size if axis is None else a.shape[axis]
    if n == 0:
        raise DomainError("mean over an empty axis")
    return scale(tsum(a, axis), 1.0 / n)


def clip(a, lo, hi):
    """Clamp values; the gradient is zero wherever the clamp is active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return make_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def log(a):
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


@dataclass
class GraphRecord:
    op: str
    node_id: int
    parent_ids: tuple


@dataclass
class ComputationGraph:
    """Records reachable from one loss, in creation (topological) order."""

    records: list = field(default_factory=list)

    @classmethod
    def trace(cls, root):
        seen, stack, nodes = set(), [root], []
        while stack:
            t = stack.pop()
            if t.node_id in seen:
                continue
            if t._released:
                raise ContractError(f"graph node '{t._op}' was already released by an earlier backward")
            seen.add(t.node_id)
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t.node_id)
        graph = cls([GraphRecord(t._op, t.node_id, tuple(p.node_id for p in t._parents))
                     for t in nodes if t._parents])
        return graph, nodes


def backward(loss, params=None):
    """Fill ``.grad`` on every leaf reachable from a scalar loss.

    Returns a dict keyed by leaf tensor. Leaves listed in ``params`` but not
    reachable get zero gradients. Saved forward state is released afterwards,
    so a graph can only be differentiated once.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not attached to a live computation graph")
    _, nodes = ComputationGraph.trace(loss)
    grads = {loss.node_id: np.ones_like(loss.data)}
    for t in reversed(nodes):
        g = grads.pop(t.node_id, None)
        if t.is_leaf:
            if t.requires_grad:
                t.grad = g if g is not None else np.zeros_like(t.data)
            continue
        if g is not None:
            for p, pg in zip(t._parents, t._backward(g)):
                if not p.requires_grad:
                    continue
                if p.node_id in grads:
                    grads[p.node_id] = grads[p.node_id] + pg
                else:
                    grads[p.node_id] = pg
        t._backward = None
        t._parents = ()
        t._released = True
    out = {t: t.grad for t in nodes if t.is_leaf and t.requires_grad}
    for p in params or ():
        if p not in out:
            p.grad = np.zeros_like(p.data)
            out[p] = p.grad
    return out


def grad_check(fn, inputs, h=1e-6, kinks=(), seed=0):
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps the input tensors to an output tensor; non-scalar outputs are
    contracted with a fixed random weighting first. Input entries within
    ``2h`` of any point in ``kinks`` are skipped (non-differentiable there).
    Error per entry is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    inputs = [Tensor(np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64),
                     requires_grad=True) for x in inputs]
    with no_grad():
        probe = fn(*inputs)
    weight = np.random.default_rng(seed).standard_normal(probe.shape)

    def scalar(*xs):
        out = fn(*xs)
        return out if out.data.size == 1 and out.data.ndim == 0 else tsum(mul(out, Tensor(weight)))

    loss = scalar(*inputs)
    if loss.requires_grad:
        backward(loss, inputs)
    analytic = [x.grad if x.grad is not None else np.zeros_like(x.data) for x in inputs]

    worst = 0.0
    with no_grad():
        for x, ga in zip(inputs, analytic):
            flat = x.data.reshape(-1)
            for k in range(flat.size):
                v = flat[k]
                if any(abs(v - c) < 2 * h for c in kinks):
                    continue
                flat[k] = v + h
                up = scalar(*inputs).item()
                flat[k] = v - h
                down = scalar(*inputs).item()
                flat[k] = v
                num = (up - down) / (2 * h)
                err = abs(ga.reshape(-1)[k] - num) / max(1.0, abs(num))
                worst = max(worst, err)
    return worst
