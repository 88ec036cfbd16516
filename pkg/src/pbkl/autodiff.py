"""Small reverse-mode autodiff over dense numpy arrays.

Every op builds its output together with a closure that pushes the output
gradient back into its parents. Shapes follow explicit rules only:

* ``add`` / ``mul`` accept equal shapes, a scalar, or a second operand whose
  shape is a trailing suffix of the first (e.g. ``[B, L, d] + [d]``).
* ``matmul`` accepts ``[..., m, k] @ [k, n]`` (shared weight) or two operands
  of equal rank with equal leading dimensions.

Anything else raises :class:`~pbkl.errors.ShapeError`.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError

DTYPE = np.float64
LOG_EPS = 1e-8

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "op")

    def __init__(self, data, requires_grad=False, *, _check=True):
        arr = np.asarray(data, dtype=DTYPE)
        if _check and not np.all(np.isfinite(arr)):
            raise NumericError("tensor values must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._consumed = False
        self.op = "leaf"

    @classmethod
    def from_op(cls, data, parents, backward, op="custom"):
        """Wrap the result of a differentiable op.

        ``backward(g)`` receives the output gradient and must return one
        gradient (or ``None``) per parent, in order.
        """
        out = cls(data, _check=False)
        out.op = op
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _topo_order(root):
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root):
    """Populate ``.grad`` on every leaf reachable from the scalar ``root``.

    Gradients accumulate into leaves that already hold a gradient. A root
    can be backpropagated only once; build a new graph for another pass.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if root._consumed:
        raise RuntimeError("backward already ran on this graph; rebuild it first")
    if not np.all(np.isfinite(root.data)):
        raise NumericError("non-finite loss")
    root._consumed = True
    if not root.requires_grad:
        return
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    # free closures so intermediate arrays can be collected
    for node in _topo_order(root):
        if node._backward is not None:
            node._parents = ()
            node._backward = None


# ---------------------------------------------------------------- shape rules


def _suffix_broadcast(a_shape, b_shape, op):
    """Return which operand is broadcast: 0 none, 1 second, 2 first."""
    if a_shape == b_shape:
        return 0
    if len(b_shape) < len(a_shape) and a_shape[len(a_shape) - len(b_shape):] == b_shape:
        return 1
    if len(a_shape) < len(b_shape) and b_shape[len(b_shape) - len(a_shape):] == a_shape:
        return 2
    raise ShapeError(f"{op}: shapes {a_shape} and {b_shape} are not suffix-compatible")


def _reduce_to(g, shape):
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _suffix_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def _bw(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return Tensor.from_op(a.data + b.data, (a, b), _bw, "add")


def sub(a, b):
    return add(a, neg(b))


def neg(x):
    return Tensor.from_op(-x.data, (x,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _suffix_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def _bw(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return Tensor.from_op(ad * bd, (a, b), _bw, "mul")


def scale(x, c):
    c = float(c)
    return Tensor.from_op(x.data * c, (x,), lambda g: (g * c,), "scale")


def log(x):
    """Natural log with the argument floored at ``LOG_EPS``."""
    if np.any(x.data < -1e-12):
        raise NumericError("log of a negative value")
    xd = np.maximum(x.data, LOG_EPS)
    live = x.data > LOG_EPS

    def _bw(g):
        return (np.where(live, g / xd, 0.0),)

    return Tensor.from_op(np.log(xd), (x,), _bw, "log")


def exp(x):
    y = np.exp(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * y,), "exp")


def abs_(x):
    s = np.sign(x.data)
    return Tensor.from_op(np.abs(x.data), (x,), lambda g: (g * s,), "abs")


def relu(x):
    m = x.data > 0
    return Tensor.from_op(np.where(m, x.data, 0.0), (x,), lambda g: (g * m,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    """tanh approximation of GELU."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    y = 0.5 * xd * (1.0 + t)

    def _bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return Tensor.from_op(y, (x,), _bw, "gelu")


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def sum_(x, axis=None):
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape

    def _bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return Tensor.from_op(x.data.sum(axis=axes), (x,), _bw, "sum")


def mean(x, axis=None):
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum_(x, axes), 1.0 / n)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        k, n = bd.shape

        def _bw(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb

    elif a.ndim == b.ndim and a.shape[:-2] == b.shape[:-2]:

        def _bw(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    else:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    return Tensor.from_op(ad @ bd, (a, b), _bw, "matmul")


def linear(x, w, b):
    """``x @ w + b`` for ``x [..., k]``, ``w [k, n]``, ``b [n]`` as one node."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: incompatible shapes {x.shape}, {w.shape}, {b.shape}")
    xd, wd = x.data, w.data
    k, n = wd.shape

    def _bw(g):
        g2 = g.reshape(-1, n)
        return g @ wd.T, xd.reshape(-1, k).T @ g2, g2.sum(axis=0)

    return Tensor.from_op(xd @ wd + b.data, (x, w, b), _bw, "linear")


def reshape(x, shape):
    old = x.shape
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor.from_op(
        np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose"
    )


def gather_rows(table, idx):
    """Rows ``table[idx]``; gradients scatter-add back into the table."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = table.shape

    def _bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor.from_op(table.data[idx], (table,), _bw, "gather")


# ---------------------------------------------------------------- composite ops


def softmax(x):
    """Softmax over the last axis, stabilized by subtracting the row max."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(y, (x,), _bw, "softmax")


softmax_rows = softmax


def _split(x, h):
    *lead, n, d = x.shape
    return np.swapaxes(x.reshape(*lead, n, h, d // h), -2, -3)


def _merge(x):
    *lead, h, n, dk = x.shape
    return np.swapaxes(x, -2, -3).reshape(*lead, n, h * dk)


def attention_weights(q, k, n_heads):
    """Per-head ``softmax(q_h k_h^T / sqrt(d_k))`` as one node.

    ``q [..., Lq, d]`` and ``k [..., Lk, d]`` give ``[..., heads, Lq, Lk]``.
    """
    if q.shape[-1] != k.shape[-1] or q.shape[:-2] != k.shape[:-2]:
        raise ShapeError(f"attention_weights: incompatible shapes {q.shape}, {k.shape}")
    if q.shape[-1] % n_heads:
        raise ShapeError(f"width {q.shape[-1]} not divisible by {n_heads} heads")
    qh, kh = _split(q.data, n_heads), _split(k.data, n_heads)
    c = 1.0 / np.sqrt(qh.shape[-1])
    s = (qh @ np.swapaxes(kh, -1, -2)) * c
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    w = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        gs = w * (g - (g * w).sum(axis=-1, keepdims=True)) * c
        return _merge(gs @ kh), _merge(np.swapaxes(gs, -1, -2) @ qh)

    return Tensor.from_op(w, (q, k), _bw, "attention_weights")


def attend(w, v):
    """Mix per-head values by attention weights and merge heads: ``[..., Lq, d]``."""
    h = w.shape[-3]
    if v.shape[:-2] != w.shape[:-3] or v.shape[-2] != w.shape[-1]:
        raise ShapeError(f"attend: incompatible shapes {w.shape}, {v.shape}")
    vh = _split(v.data, h)
    wd = w.data

    def _bw(g):
        gh = _split(g, h)
        return gh @ np.swapaxes(vh, -1, -2), _merge(np.swapaxes(wd, -1, -2) @ gh)

    return Tensor.from_op(_merge(wd @ vh), (w, v), _bw, "attend")


def layer_norm(x, gamma, beta, eps=1e-5):
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gamma.data

    def _bw(g):
        gh = g * gd
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, _reduce_to(g * xhat, gd.shape), _reduce_to(g, gd.shape)

    return Tensor.from_op(xhat * gd + beta.data, (x, gamma, beta), _bw, "layer_norm")


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    """Per-parameter and overall relative errors of analytic vs numeric gradients."""

    errors: list = field(default_factory=list)
    max_rel_error: float = 0.0

    def passed(self, tol=1e-4):
        return self.max_rel_error <= tol


def finite_difference_check(f, params, h=1e-5, floor=1e-8):
    """Compare ``backward`` gradients with central differences.

    ``f`` is a zero-argument callable that rebuilds the graph from the
    current parameter values and returns a scalar Tensor. The relative error
    of each parameter is ``max|analytic - numeric| / max(max|analytic|,
    max|numeric|, floor)``; the report holds the worst one.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    for p in params:
        p.grad = None
    backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    report = GradCheckReport()
    with no_grad():
        for p, ga in zip(params, analytic):
            gn = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            gflat = gn.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                gflat[i] = (fp - fm) / (2 * h)
            denom = max(np.abs(ga).max(initial=0.0), np.abs(gn).max(initial=0.0), floor)
            err = float(np.abs(ga - gn).max(initial=0.0) / denom)
            report.errors.append(err)
    report.max_rel_error = max(report.errors, default=0.0)
    for p in params:
        p.grad = None
    return report
