"""A small reverse-mode autodiff engine over float64 numpy arrays.

Every op records a closure mapping the output gradient to one gradient per
parent. ``backward`` walks the graph in reverse topological order and
accumulates into ``.grad`` of the leaf tensors that require gradients;
intermediate gradients are not retained.

Shapes follow numpy broadcasting; gradients of broadcast operands are summed
back to the operand's shape. Leading batch axes are carried through every op,
so a whole minibatch runs as one graph.
"""
import contextlib
import threading

import numpy as np

from . import _kernels
from .errors import (
    ContractError,
    DegenerateRowError,
    DimensionError,
    DomainError,
    EmbeddingIndexError,
)

_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

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
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

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
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a constant")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    """Hadamard product."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def scale(a, c):
    c = float(c)

    def bw(g):
        return (g * c,)

    return _make(a.data * c, (a,), bw)


def relu(a):
    pos = a.data > 0

    def bw(g):
        return (g * pos,)

    return _make(np.where(pos, a.data, 0.0), (a,), bw)


def _sigmoid(x):
    out = np.empty_like(x)
    p = x >= 0
    out[p] = 1.0 / (1.0 + np.exp(-x[p]))
    e = np.exp(x[~p])
    out[~p] = e / (1.0 + e)
    return out


def sigmoid(a):
    y = _sigmoid(a.data)

    def bw(g):
        return (g * y * (1.0 - y),)

    return _make(y, (a,), bw)


def exp(a):
    y = np.exp(a.data)

    def bw(g):
        return (g * y,)

    return _make(y, (a,), bw)


def log(a, clamp_min=None):
    """Natural log; with ``clamp_min`` the argument is floored and the
    gradient is zero wherever the floor is active."""
    x = a.data
    if clamp_min is not None:
        active = x >= clamp_min
        # NaN must survive the floor so non-finite losses stay detectable
        xc = np.where(active | np.isnan(x), x, clamp_min)
    else:
        active = None
        xc = x

    def bw(g):
        gx = g / xc
        if active is not None:
            gx = gx * active
        return (gx,)

    return _make(np.log(xc), (a,), bw)


def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes; leading axes are batch axes
    and may broadcast (e.g. ``(n, L, k) @ (k, m)``)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} differ") from None

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            # fold batch axes into one GEMM instead of summing per-batch products
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bw)


def transpose(a):
    def bw(g):
        return (np.swapaxes(g, -1, -2),)

    return _make(np.swapaxes(a.data, -1, -2), (a,), bw)


def reshape(a, shape):
    old = a.shape

    def bw(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape), (a,), bw)


def _is_basic_index(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is Ellipsis or p is None or isinstance(p, (slice, int, np.integer)) for p in parts)


def getitem(a, index):
    shape = a.shape
    basic = _is_basic_index(index)

    def bw(g):
        out = np.zeros(shape)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), bw)


def concat(parts, axis=-1):
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat: empty list")
    ax = axis % parts[0].ndim
    lead = [p.shape[:ax] + p.shape[ax + 1:] for p in parts]
    if any(s != lead[0] for s in lead):
        raise DimensionError(f"concat: shapes {[p.shape for p in parts]} disagree off axis {axis}")
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(parts))
        )

    return _make(np.concatenate([p.data for p in parts], axis=ax), parts, bw)


def concat_last_dim(parts):
    return concat(parts, axis=-1)


def split_last_dim(x, sizes):
    if sum(sizes) != x.shape[-1] or any(s <= 0 for s in sizes):
        raise DimensionError(f"split: sizes {list(sizes)} do not partition last dim {x.shape[-1]}")
    out = []
    start = 0
    for s in sizes:
        out.append(getitem(x, (Ellipsis, slice(start, start + s))))
        start += s
    return out


def masked_fill(a, keep, value):
    """Entries where ``keep`` is False become ``value`` and carry no gradient."""
    keep = np.asarray(keep, dtype=bool)

    def bw(g):
        return (_unbroadcast(np.where(keep, g, 0.0), a.shape),)

    return _make(np.where(keep, a.data, value), (a,), bw)


# ---------------------------------------------------------------------------
# softmax, embedding, sampling
# ---------------------------------------------------------------------------

def softmax_rows(x, mask=None, allow_empty=False):
    """Softmax over the last axis.

    ``mask`` is a boolean array broadcastable to ``x``; False entries are
    excluded and come out exactly 0. A row with no unmasked entry raises
    unless ``allow_empty``, in which case the row is all zeros.
    """
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    empty = ~np.isfinite(m)
    if empty.any():
        if not allow_empty:
            raise DegenerateRowError("softmax_rows: a row has every entry masked")
        m = np.where(empty, 0.0, m)
    e = np.exp(z - m)
    s = e.sum(axis=-1, keepdims=True)
    y = e / np.where(s == 0.0, 1.0, s)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw)


def embedding_lookup(table, ids, padding_idx=0):
    """Gather rows of ``table``; ``ids`` may have any shape.

    The gradient is scatter-added back into the table; the ``padding_idx``
    row never receives gradient (pass ``None`` to train every row).
    """
    ids = np.asarray(ids)
    if ids.size and not np.issubdtype(ids.dtype, np.integer):
        raise EmbeddingIndexError(f"embedding ids must be integers, got {ids.dtype}")
    ids = ids.astype(np.int64)
    n = table.shape[0]
    bad = (ids < 0) | (ids >= n)
    if bad.any():
        raise EmbeddingIndexError(f"embedding id {int(ids[bad][0])} out of range [0, {n})")

    def bw(g):
        gt = np.zeros_like(table.data)
        _kernels.scatter_add_rows(gt, ids.ravel(), g.reshape(-1, table.shape[1]))
        if padding_idx is not None:
            gt[padding_idx] = 0.0
        return (gt,)

    return _make(table.data[ids], (table,), bw)


def gaussian_reparam(mean, sigma, rng):
    """``mean + sigma * eps`` with ``eps ~ N(0, 1)`` drawn from ``rng``.

    ``sigma`` is a scalar (float or 0-d / single-element Tensor); gradient
    flows to ``mean`` with coefficient 1 and to ``sigma`` with coefficient eps.
    """
    sigma = as_tensor(sigma)
    if sigma.size != 1:
        raise DimensionError(f"gaussian_reparam: sigma must be scalar, got shape {sigma.shape}")
    s = float(sigma.data.reshape(-1)[0])
    if not s >= 0.0:
        raise DomainError(f"gaussian_reparam: sigma must be >= 0, got {s}")
    eps = rng.standard_normal(mean.shape)

    def bw(g):
        return g, np.full(sigma.shape, float(np.sum(g * eps)))

    return _make(mean.data + s * eps, (mean, sigma), bw)


def layer_norm(x, gamma, beta, eps=1e-8):
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def bw(g):
        gxhat = g * gamma.data
        gx = inv / n * (
            n * gxhat - gxhat.sum(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), bw)


def dropout(x, rate, rng):
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _topo_order(root):
    order = []
    seen = set()
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
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Calling twice without zeroing doubles the gradients.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {getattr(loss, 'shape', None)}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def numerical_grad(f, inputs, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. each input's data."""
    out = []
    with no_grad():
        for t in inputs:
            g = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            gf = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                gf[i] = (fp - fm) / (2 * h)
            out.append(g)
    return out


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(f, inputs, h=1e-5):
    """Largest relative error between backward() and finite differences."""
    for t in inputs:
        t.grad = None
    backward(f())
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    numeric = numerical_grad(f, inputs, h=h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
