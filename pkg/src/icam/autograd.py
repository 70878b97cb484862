"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op returns a fresh :class:`Tensor`; when any input requires grad the
output remembers its parents and a closure mapping the output cotangent to
input cotangents. :func:`backward` walks that graph in reverse topological
order. Broadcasting is deliberately narrow: elementwise ops accept operands of
identical shape or a 0-d scalar, and anything wider goes through an explicit
:func:`broadcast_to`.
"""

import contextlib
import threading

import numpy as np

from .errors import ContractError, DimensionError, DomainError, InfeasibleError, NumericError

_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Build no tape inside the block (inference rollouts)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)
    __getitem__ = lambda self, idx: index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return swapaxes(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _pair(a, b, op):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are neither equal nor scalar")
    return a, b


def _fit(g, shape):
    # cotangent for a 0-d operand combined with a larger tensor
    if g.shape == shape:
        return g
    return np.asarray(g.sum())


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _pair(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (_fit(g, a.shape), _fit(g, b.shape)), "add")


def sub(a, b):
    a, b = _pair(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (_fit(g, a.shape), _fit(-g, b.shape)), "sub")


def mul(a, b):
    a, b = _pair(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_fit(g * b.data, a.shape), _fit(g * a.data, b.shape)),
        "mul",
    )


def div(a, b):
    a, b = _pair(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("division by zero")
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _fit(ga, a.shape), _fit(-ga * out, b.shape)

    return _make(out, (a, b), bw, "div")


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sigmoid(a):
    a = as_tensor(a)
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a):
    a = as_tensor(a)
    pos = a.data > 0.0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def where(mask, a, fill):
    """``fill`` where ``mask`` is true, else ``a``; ``fill`` is a constant."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise DimensionError(f"where: mask {mask.shape} vs tensor {a.shape}")
    return _make(np.where(mask, fill, a.data), (a,), lambda g: (np.where(mask, 0.0, g),), "where")


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "tanh": tanh,
}


def elementwise(op, *args):
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    """``a[..., m, k] @ b[..., k, n]``.

    Leading dims must match exactly, or ``b`` may be a plain 2-D matrix shared
    across all leading dims of ``a`` (a weight).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    shared = b.ndim == 2 and a.ndim > 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if shared:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def swapaxes(a, ax1=-1, ax2=-2):
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def reshape(a, shape):
    a = as_tensor(a)
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def broadcast_to(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    src = a.shape
    out = np.broadcast_to(a.data, shape)

    def bw(g):
        lead = g.ndim - len(src)
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make(out, (a,), bw, "broadcast_to")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
        "concat",
    )


def index(a, idx):
    """Gather with any numpy index; the cotangent scatter-adds repeated picks."""
    a = as_tensor(a)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(np.asarray(a.data[idx]), (a,), bw, "index")


# ---------------------------------------------------------------- reductions

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(count))


# ---------------------------------------------------------------- composite primitives

def _masked_shift(x, mask):
    if mask.shape != x.shape:
        raise DimensionError(f"mask {mask.shape} vs logits {x.shape}")
    if np.any(mask.all(axis=-1)):
        raise InfeasibleError("softmax row with every entry masked")
    z = np.where(mask, -np.inf, x)
    m = z.max(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore"):
        e = np.exp(z - m)
    s = e.sum(axis=-1, keepdims=True)
    return z, m, e, s


def softmax_masked(logits, mask):
    """Softmax along the last axis; ``mask`` marks excluded entries (exact 0 output)."""
    x = as_tensor(logits)
    mask = np.asarray(mask, dtype=bool)
    _, _, e, s = _masked_shift(x.data, mask)
    p = e / s

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), bw, "softmax_masked")


def log_softmax_masked(logits, mask):
    """Log of :func:`softmax_masked`; excluded entries hold 0.0 and carry no gradient."""
    x = as_tensor(logits)
    mask = np.asarray(mask, dtype=bool)
    z, m, e, s = _masked_shift(x.data, mask)
    p = e / s
    out = np.where(mask, 0.0, x.data - m - np.log(s))

    def bw(g):
        g = np.where(mask, 0.0, g)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax_masked")


def instance_norm(h, eps=1e-5):
    """Normalise each feature over the node axis (-2) of one instance, no affine."""
    h = as_tensor(h)
    n = h.shape[-2]
    mu = h.data.mean(axis=-2, keepdims=True)
    xc = h.data - mu
    with np.errstate(over="ignore"):
        var = (xc * xc).mean(axis=-2, keepdims=True)
    if not np.all(np.isfinite(var)):
        raise NumericError("instance_norm variance overflowed")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gs = g.sum(axis=-2, keepdims=True)
        gx = (g * xhat).sum(axis=-2, keepdims=True)
        return (inv * (g - gs / n - xhat * gx / n),)

    return _make(xhat, (h,), bw, "instance_norm")


# ---------------------------------------------------------------- reverse sweep

def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable ``t`` requiring grad."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


def grad_check(f, x, h=1e-5, coords=None):
    """Max relative error between analytic and central-difference gradients of ``f`` at ``x``.

    ``coords`` restricts the comparison to the given flat indices of ``x``.
    The relative error of one coordinate is ``|a - n| / max(1, |a|)``.
    """
    x.grad = None
    backward(f(x))
    analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
    flat = x.data.reshape(-1)
    if not np.shares_memory(flat, x.data):
        raise ContractError("grad_check needs a contiguous tensor")
    worst = 0.0
    for i in range(x.size) if coords is None else coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(analytic[i])))
    return worst
