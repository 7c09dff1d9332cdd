"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation builds a node holding its parents and a closure mapping the
upstream gradient to one gradient per parent. :func:`backward` walks the
graph once in reverse topological order and returns a map from each
``requires_grad`` leaf to its accumulated gradient.

The module also provides :func:`grouped_matmul`, which evaluates a list of
independent matrix products in one packed batched call, and its
equal-shape specialisation :func:`tokenwise_matmul` used for every
token-specific projection in the model.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, UsageError

__all__ = [
    "Tensor",
    "tensor",
    "backward",
    "no_grad",
    "FlopCounter",
    "matmul",
    "grouped_matmul",
    "tokenwise_matmul",
    "layer_norm",
    "concat",
    "take",
    "gather_concat",
    "swiglu",
    "index_add",
    "sigmoid",
    "swish",
    "exp",
    "log",
    "softmax",
    "logsumexp",
    "bce_with_logits",
    "gradcheck",
    "EPS_FLOOR",
]

EPS_FLOOR = 1e-12

_grad_enabled = True
_flop_counters: list["FlopCounter"] = []


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class FlopCounter:
    """Tally matmul FLOPs (2*m*n*p per product) executed inside the block."""

    def __init__(self):
        self.matmul_flops = 0
        self.products: list[tuple[int, int, int, int]] = []

    def add(self, batch, m, n, p):
        self.matmul_flops += 2 * batch * m * n * p
        self.products.append((batch, m, n, p))

    def __enter__(self):
        _flop_counters.append(self)
        return self

    def __exit__(self, *exc):
        _flop_counters.remove(self)
        return False


def _record_matmul(batch, m, n, p):
    for counter in _flop_counters:
        counter.add(batch, m, n, p)


class Tensor:
    """An immutable float64 array that may participate in a gradient graph."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
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

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{flag}{label})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def mT(self):
        return self.swapaxes(-1, -2)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def swish(self):
        return swish(self)


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# graph traversal


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Differentiate a scalar ``loss`` with respect to every reachable leaf.

    Returns:
        Mapping from each ``requires_grad`` leaf tensor to the gradient of
        ``loss`` with respect to it (same shape as the leaf). Leaves used
        several times receive the sum of all contributions.

    Raises:
        UsageError: if ``loss`` is not a scalar.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise UsageError("backward() requires a scalar loss tensor")
    if not loss.requires_grad:
        return {}

    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    return leaves


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def power(a, exponent):
    if isinstance(exponent, Tensor):
        raise UsageError("power() supports scalar exponents only")
    ad = a.data
    p = float(exponent)
    return _node(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def exp(a):
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,))


def sigmoid(a):
    out = expit(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def swish(a):
    """x * sigmoid(x)."""
    x = a.data
    s = expit(x)
    return _node(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


# ---------------------------------------------------------------------------
# reductions and shape


def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape):
    orig = a.shape
    # np.reshape on a C-contiguous array is a view: no arithmetic, no copy.
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def _basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a, idx):
    shape = a.shape
    basic = _basic_index(idx)

    def bw(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _node(np.array(a.data[idx]), (a,), bw)


def concat(tensors: Sequence[Tensor], axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def take(a, indices, axis=0, unique=False):
    """Gather slices of ``a`` along ``axis`` (embedding lookup when axis=0).

    ``unique=True`` promises no repeated index, allowing a plain scatter in
    the backward pass.
    """
    idx = np.asarray(indices, dtype=np.int64)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        if axis == 0 and unique:
            out[idx] = g
        elif axis == 0:
            np.add.at(out, idx, g)
        else:
            np.add.at(np.moveaxis(out, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (out,)

    return _node(np.take(a.data, idx, axis=axis), (a,), bw)


def index_add(rows, indices, values):
    """Return a ``(rows, ...)`` array of zeros with ``values`` added at ``indices``."""
    idx = np.asarray(indices, dtype=np.int64)
    out = np.zeros((rows,) + values.shape[1:])
    np.add.at(out, idx, values.data)
    return _node(out, (values,), lambda g: (g[idx],))


# ---------------------------------------------------------------------------
# products


def matmul(a, b, *, _count=True):
    """Batched matrix product over the last two axes, with broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ConfigError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ConfigError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)
    if _count and _flop_counters:
        batch = int(np.prod(out.shape[:-2])) if out.ndim > 2 else 1
        _record_matmul(batch, ad.shape[-2], ad.shape[-1], bd.shape[-1])

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(out, (a, b), bw)


def _pack(tensors, rows, cols):
    """Differentiably zero-pad 2-D tensors into one (G, rows, cols) block."""
    data = np.zeros((len(tensors), rows, cols))
    for i, t in enumerate(tensors):
        data[i, : t.shape[0], : t.shape[1]] = t.data
    shapes = [t.shape for t in tensors]

    def bw(g):
        return tuple(g[i, : s[0], : s[1]] for i, s in enumerate(shapes))

    return _node(data, tuple(tensors), bw)


def grouped_matmul(lhs_list: Sequence[Tensor], rhs_list: Sequence[Tensor]) -> list[Tensor]:
    """Multiply ``lhs_list[i] @ rhs_list[i]`` for every i in one dispatch.

    Operands are zero-padded into a packed ``(G, M, N) x (G, N, P)`` layout
    (M, N, P the per-group maxima) and multiplied with a single batched
    matmul; each result is then sliced back out at its group offset. Padding
    contributes exact zeros, so results agree with per-pair :func:`matmul`.

    Raises:
        ConfigError: list lengths differ, an operand is not 2-D, or a pair's
            inner dimensions mismatch (the message names the index).
    """
    lhs_list = [_as_tensor(t) for t in lhs_list]
    rhs_list = [_as_tensor(t) for t in rhs_list]
    if len(lhs_list) != len(rhs_list):
        raise ConfigError(f"grouped_matmul got {len(lhs_list)} lhs and {len(rhs_list)} rhs operands")
    if not lhs_list:
        return []
    for i, (a, b) in enumerate(zip(lhs_list, rhs_list)):
        if a.ndim != 2 or b.ndim != 2:
            raise ConfigError(f"grouped_matmul pair {i}: operands must be 2-D, got {a.shape}, {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ConfigError(f"grouped_matmul pair {i}: inner dimensions differ {a.shape} x {b.shape}")

    m = max(a.shape[0] for a in lhs_list)
    n = max(a.shape[1] for a in lhs_list)
    p = max(b.shape[1] for b in rhs_list)
    if all(a.shape == (m, n) for a in lhs_list):
        packed_a = reshape(concat(lhs_list, axis=0), (len(lhs_list), m, n))
    else:
        packed_a = _pack(lhs_list, m, n)
    if all(b.shape == (n, p) for b in rhs_list):
        packed_b = reshape(concat(rhs_list, axis=0), (len(rhs_list), n, p))
    else:
        packed_b = _pack(rhs_list, n, p)

    if _flop_counters:
        for a, b in zip(lhs_list, rhs_list):
            _record_matmul(1, a.shape[0], a.shape[1], b.shape[1])
    packed = matmul(packed_a, packed_b, _count=False)
    return [_unpack(packed, i, a.shape[0], b.shape[1]) for i, (a, b) in enumerate(zip(lhs_list, rhs_list))]


def _unpack(packed, i, rows, cols):
    # a view into the packed result; nothing downstream writes into it
    shape = packed.shape

    def bw(g):
        out = np.zeros(shape)
        out[i, :rows, :cols] = g
        return (out,)

    return _node(packed.data[i, :rows, :cols], (packed,), bw)


def tokenwise_matmul(x: Tensor, w: Tensor) -> Tensor:
    """Apply a distinct matrix to every token: ``out[..., t, :] = x[..., t, :] @ w[t]``.

    ``x`` has shape ``(..., T, n)`` and ``w`` has shape ``(T, n, p)``. This is
    the equal-shape case of :func:`grouped_matmul`: all leading batch rows of
    token t are stacked into one operand so the T products run as a single
    batched call.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if w.ndim != 3 or x.ndim < 2 or x.shape[-2] != w.shape[0] or x.shape[-1] != w.shape[1]:
        raise ConfigError(f"tokenwise_matmul shape mismatch: x {x.shape}, w {w.shape}")
    t, n, p = w.shape
    lead = x.shape[:-2]
    xd = x.data.reshape(-1, t, n).transpose(1, 0, 2)
    wd = w.data
    out = np.matmul(xd, wd)
    rows = xd.shape[1]
    if _flop_counters:
        for _ in range(t):
            _record_matmul(1, rows, n, p)

    def bw(g):
        gr = g.reshape(-1, t, p).transpose(1, 0, 2)
        gx = np.matmul(gr, wd.transpose(0, 2, 1)).transpose(1, 0, 2).reshape(lead + (t, n))
        gw = np.matmul(xd.transpose(0, 2, 1), gr)
        return gx, gw

    return _node(out.transpose(1, 0, 2).reshape(lead + (t, p)), (x, w), bw)


# ---------------------------------------------------------------------------
# fused composites


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalise the last axis to zero mean / unit variance, then scale and shift.

    ``eps`` is floored at ``EPS_FLOOR`` so constant rows never divide by zero.
    """
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ConfigError(f"layer_norm: gain/bias must have shape ({d},), got {gain.shape}, {bias.shape}")
    eps = max(float(eps), EPS_FLOOR)
    xd = x.data
    xc = xd - xd.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(xhat * gd + bias.data, (x, gain, bias), bw)


def _proj(x, w):
    """x @ w for shared 2-D ``w`` or per-token 3-D ``w`` (x: (N, T, n) in that case)."""
    if w.ndim == 2:
        return x @ w
    return np.matmul(x.transpose(1, 0, 2), w).transpose(1, 0, 2)


def _proj_grads(x, w, g):
    """Gradients of ``_proj(x, w)`` given upstream ``g``."""
    if w.ndim == 2:
        x2 = x.reshape(-1, x.shape[-1])
        return g @ w.T, x2.T @ g.reshape(-1, g.shape[-1])
    gt = g.transpose(1, 0, 2)
    gx = np.matmul(gt, w.transpose(0, 2, 1)).transpose(1, 0, 2)
    gw = np.matmul(x.transpose(1, 2, 0), gt)
    return gx, gw


def swiglu(x, w1, w2, w3):
    """Fused ``(swish(x @ w1) * (x @ w2)) @ w3``.

    Weights are either shared 2-D matrices, applied to every row, or
    per-token 3-D stacks ``(T, n, p)`` applied to ``x`` of shape ``(..., T, n)``.
    """
    x, w1, w2, w3 = (_as_tensor(t) for t in (x, w1, w2, w3))
    tokenwise = w1.ndim == 3
    if tokenwise and not (x.ndim >= 2 and x.shape[-2] == w1.shape[0]):
        raise ConfigError(f"swiglu: input {x.shape} does not match token weights {w1.shape}")
    if x.shape[-1] != w1.shape[-2] or w1.shape != w2.shape or w3.shape[-2] != w1.shape[-1]:
        raise ConfigError(f"swiglu shape mismatch: x {x.shape}, w1 {w1.shape}, w2 {w2.shape}, w3 {w3.shape}")
    lead = x.shape[:-2] if tokenwise else x.shape[:-1]
    if tokenwise:
        xd = x.data.reshape((-1,) + x.shape[-2:])
    else:
        xd = x.data.reshape(-1, x.shape[-1])
    a = _proj(xd, w1.data)
    b = _proj(xd, w2.data)
    s = expit(a)
    sw = a * s
    h = sw * b
    out = _proj(h, w3.data)
    if _flop_counters:
        n, r = w1.shape[-2], w1.shape[-1]
        rows = xd.shape[0]
        for m, k, p in ((rows, n, r), (rows, n, r), (rows, r, w3.shape[-1])):
            if tokenwise:
                for _ in range(w1.shape[0]):
                    _record_matmul(1, m, k, p)
            else:
                _record_matmul(1, m, k, p)
    out_shape = lead + out.shape[1:]

    def bw(g):
        g = g.reshape(out.shape)
        gh, g3 = _proj_grads(h, w3.data, g)
        ga = gh * b * (s + a * s * (1.0 - s))
        gb = gh * sw
        gx1, g1 = _proj_grads(xd, w1.data, ga)
        gx2, g2 = _proj_grads(xd, w2.data, gb)
        return (gx1 + gx2).reshape(x.shape), g1, g2, g3

    return _node(out.reshape(out_shape), (x, w1, w2, w3), bw)


def gather_concat(tables, indices):
    """Concatenate ``tables[j][indices[j]]`` along the last axis in one node.

    Equivalent to ``concat([take(t, i) for t, i in zip(tables, indices)], 1)``.
    """
    idx = [np.asarray(i, dtype=np.int64) for i in indices]
    widths = [t.shape[1] for t in tables]
    shapes = [t.shape for t in tables]
    splits = np.cumsum(widths)[:-1]
    data = np.concatenate([t.data[i] for t, i in zip(tables, idx)], axis=1)

    def bw(g):
        out = []
        for gj, i, shape in zip(np.split(g, splits, axis=1), idx, shapes):
            full = np.zeros(shape)
            np.add.at(full, i, gj)
            out.append(full)
        return tuple(out)

    return _node(data, tuple(tables), bw)


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), bw)


def logsumexp(a, axis=-1):
    """Numerically stable ``log(sum(exp(a)))`` along ``axis`` (axis removed)."""
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    soft = e / s

    def bw(g):
        return (np.expand_dims(g, axis) * soft,)

    return _node(out, (a,), bw)


def bce_with_logits(logits, labels):
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 ``labels``."""
    x = logits.data
    y = np.asarray(labels, dtype=np.float64).reshape(x.shape)
    losses = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n = x.size

    def bw(g):
        return (g * (expit(x) - y) / n,)

    return _node(np.asarray(losses.mean()), (logits,), bw)


# ---------------------------------------------------------------------------
# finite-difference checking


def gradcheck(fn: Callable[[], Tensor], params: Iterable[Tensor], step=1e-4, rtol=1e-4,
              atol=1e-10):
    """Compare :func:`backward` against central finite differences.

    ``fn`` is re-evaluated after perturbing each entry of each parameter in
    place. The error for a parameter is ``||analytic - numeric|| /
    max(||analytic||, ||numeric||)``; parameters whose gradients are both
    below ``atol`` in norm count as exact.

    Returns:
        ``(ok, errors)`` with ``errors`` mapping parameter name (or index)
        to its relative error.
    """
    params = list(params)
    grads = backward(fn())
    errors = {}
    with no_grad():
        for pi, p in enumerate(params):
            analytic = grads.get(p, np.zeros_like(p.data))
            numeric = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            nflat = numeric.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                plus = fn().item()
                flat[j] = orig - step
                minus = fn().item()
                flat[j] = orig
                nflat[j] = (plus - minus) / (2.0 * step)
            scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
            err = 0.0 if scale < atol else float(np.linalg.norm(analytic - numeric) / scale)
            errors[p.name or pi] = err
    return all(e <= rtol for e in errors.values()), errors
