"""Dense tensors with reverse-mode autodiff over a dynamically recorded graph.

A :class:`Tensor` wraps a contiguous numpy array (float32 unless another float
dtype is passed in). Operations on tensors that require gradients attach a
:class:`Node` holding the op tag, the inputs and a closure that maps the
output gradient to input gradients. :func:`backward` walks that graph once in
reverse topological order; the closures are dropped afterwards, so a second
pass over the same graph raises :class:`GraphConsumed`.
"""
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import GraphConsumed, NotScalarLoss, ShapeMismatch

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Node:
    __slots__ = ("op", "inputs", "backward_fn", "consumed")

    def __init__(self, op, inputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "is_spike")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.name = name
        self.is_spike = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return self.shape[0]

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return scale(self, 1.0 / other)

    def sum(self):
        return sum_all(self)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=np.float32):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def record(op, data, inputs, backward_fn):
    """Wrap ``data`` in a Tensor and attach a graph node when any input needs grads."""
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), backward_fn)
    return out


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and g.shape[lead + i] != 1)
    r = np.sum(g, axis=axes, dtype=np.float64, keepdims=True)
    if lead:
        r = r.reshape(r.shape[lead:])
    return r.reshape(shape).astype(g.dtype)


def _broadcast(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from None


def _operands(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _broadcast(a, b)
    return a, b


def add(a, b):
    if not isinstance(b, Tensor) and np.isscalar(b) and b == 0:
        return a
    a, b = _operands(a, b)
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b),
                  lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b):
    a, b = _operands(a, b)
    sa, sb = a.shape, b.shape
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b):
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(a, b)
    a, b = _operands(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                unbroadcast(g * ad, bd.shape) if b.requires_grad else None)
    return record("mul", ad * bd, (a, b), bw)


def scale(a, c):
    c = a.dtype.type(c)
    return record("scale", a.data * c, (a,), lambda g: (g * c,))


def sum_all(a):
    shape, dt = a.shape, a.dtype
    out = np.asarray(np.sum(a.data, dtype=np.float64), dtype=dt)
    return record("sum", out, (a,), lambda g: (np.broadcast_to(g, shape).astype(dt),))


def mean(a, axis=None):
    """Arithmetic mean over ``axis`` (all axes when None), 64-bit accumulation."""
    dt, shape = a.dtype, a.shape
    if axis is None:
        n = a.size
        out = np.asarray(np.mean(a.data, dtype=np.float64), dtype=dt)
        return record("mean", out, (a,),
                      lambda g: (np.full(shape, g.reshape(()) / n, dtype=dt),))
    n = shape[axis]
    out = np.mean(a.data, axis=axis, dtype=np.float64).astype(dt)

    def bw(g):
        g = np.expand_dims(g, axis) / dt.type(n)
        return (np.ascontiguousarray(np.broadcast_to(g, shape), dtype=dt),)
    return record("mean", out, (a,), bw)


def reshape(a, shape):
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {old} into {shape}") from None
    t = record("reshape", out, (a,), lambda g: (g.reshape(old),))
    t.is_spike = a.is_spike
    return t


def take(a, i):
    """Element ``i`` of a 1-D tensor as a shape-(1,) tensor."""
    n = a.shape[0]

    def bw(g):
        out = np.zeros(n, dtype=g.dtype)
        out[i] = g[0]
        return (out,)
    return record("take", a.data[i:i + 1].copy(), (a,), bw)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeMismatch(f"stack needs equal shapes, got {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.ascontiguousarray(np.take(g, i, axis=axis)) for i in range(len(tensors)))
    return record("stack", out, tuple(tensors), bw)


# -- backward pass ------------------------------------------------------
def _topo(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        t, expanded = stack_.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack_.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack_.append((inp, False))
    return order


@dataclass
class Graph:
    """Recorded computation in topological order (inputs precede consumers)."""

    nodes: list = field(default_factory=list)   # (op, output id, input ids)

    @classmethod
    def trace(cls, root):
        g = cls()
        for t in _topo(root):
            if t.node is not None:
                g.nodes.append((t.node.op, id(t), tuple(id(i) for i in t.node.inputs)))
        return g


def backward(loss):
    """Populate ``.grad`` of every ``requires_grad`` leaf reachable from ``loss``.

    Gradients accumulate additively, both across fan-out inside the graph and
    across repeated calls on fresh graphs sharing leaves.
    """
    if loss.size != 1:
        raise NotScalarLoss(f"loss must hold a single value, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    if any(t.node is not None and t.node.consumed for t in order):
        raise GraphConsumed("this graph was already differentiated")
    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t.node
        if node is None:
            g = g.astype(t.dtype, copy=False)
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        gins = node.backward_fn(g)
        node.consumed = True
        node.backward_fn = None
        for inp, gi in zip(node.inputs, gins):
            if gi is None or not inp.requires_grad:
                continue
            prev = grads.get(id(inp))
            grads[id(inp)] = gi if prev is None else prev + gi


# -- golden dump format -------------------------------------------------
def dump_tensor(t, path):
    """Text dump: shape on line one, then one ``%.9g`` value per line."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(" ".join(str(n) for n in arr.shape) + "\n")
        for v in arr.reshape(-1):
            fh.write(f"{float(v):.9g}\n")


def load_tensor_dump(path, dtype=np.float32):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    shape = tuple(int(n) for n in lines[0].split())
    data = np.array([float(v) for v in lines[1:]], dtype=dtype)
    return Tensor(data.reshape(shape), dtype=dtype)
