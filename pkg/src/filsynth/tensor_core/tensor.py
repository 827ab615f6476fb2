"""Dense tensors with a reverse-mode differentiation tape.

Every tensor gets a monotonically increasing ``node_id`` at creation, so
sorting the nodes reachable from a loss by id yields a valid topological
order. That ordered list is the :class:`Tape`.
"""

import contextlib
import itertools

import numpy as np

_ids = itertools.count(1)
_state = {"dtype": np.float32, "grad": True}


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype of newly created tensors."""
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    """Run operations without recording them."""
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def default_dtype():
    return _state["dtype"]


def grad_enabled():
    return _state["grad"]


class Tensor:
    """An N-dimensional array that can take part in differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.array(data, dtype=dtype or _state["dtype"])
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a Python scalar")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def abs(self):
        return tabs(self)

    def square(self):
        return square(self)

    def log(self):
        return log(self)

    def backward(self, params=None):
        backward(self, params)


def _not_scalar(t):
    raise ValueError(f"tensor of shape {t.shape} is not a scalar")


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data, parents, backward_fn):
    """Wrap ``data`` as the output of an operation on ``parents``.

    ``backward_fn(grad)`` must return one gradient (or None) per parent.
    Nothing is recorded when no parent requires a gradient.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.node_id = next(_ids)
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


class Tape:
    """The operations reachable from ``root``, in recording order."""

    def __init__(self, root):
        seen = {}
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen[id(t)] = t
            stack.extend(t._parents)
        self.nodes = sorted(seen.values(), key=lambda t: t.node_id)

    @property
    def ops(self):
        return [n for n in self.nodes if n._parents]

    @property
    def leaves(self):
        return [n for n in self.nodes if not n._parents and n.requires_grad]

    def __len__(self):
        return len(self.ops)

    def is_topological(self):
        pos = {id(n): i for i, n in enumerate(self.nodes)}
        return all(pos[id(p)] < pos[id(n)] for n in self.nodes for p in n._parents)


def backward(loss, params=None):
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    ``params`` (an iterable of tensors) have their gradients reset to zero
    first, so parameters the loss does not reach end up with a zero gradient.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params:
            p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        if params is None:
            raise ValueError("loss is not on the tape (no input requires a gradient)")
        return None
    tape = Tape(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            g = g.astype(node.data.dtype, copy=False)
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return tape


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    if not isinstance(b, Tensor):
        return record(a.data + a.data.dtype.type(b), (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        return add(b, a)
    _same_shape(a, b, "add")
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    if not isinstance(b, Tensor):
        return add(a, -b)
    _same_shape(a, b, "sub")
    return record(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a):
    return record(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(b)
        return record(a.data * c, (a,), lambda g: (g * c,))
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def tsum(a):
    """Sum of all elements, accumulated in 64 bits."""
    dt = a.data.dtype
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=dt)
    return record(out, (a,), lambda g: (np.full(a.shape, g, dtype=dt),))


def mean(a):
    dt = a.data.dtype
    n = a.data.size
    out = np.asarray(a.data.mean(dtype=np.float64), dtype=dt)
    return record(out, (a,), lambda g: (np.full(a.shape, g / n, dtype=dt),))


def tabs(a):
    d = a.data
    return record(np.abs(d), (a,), lambda g: (g * np.sign(d),))


def square(a):
    d = a.data
    return record(d * d, (a,), lambda g: (2 * g * d,))


def log(a):
    d = a.data
    return record(np.log(d), (a,), lambda g: (g / d,))


def clamp(a, lo, hi):
    d = a.data
    dt = d.dtype.type
    lo, hi = dt(lo), dt(hi)
    keep = (d >= lo) & (d <= hi)
    return record(np.clip(d, lo, hi), (a,), lambda g: (g * keep,))


def reshape(a, shape):
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a):
    if a.ndim != 2:
        raise ValueError("transpose expects a matrix")
    return record(a.data.T.copy(), (a,), lambda g: (g.T,))
