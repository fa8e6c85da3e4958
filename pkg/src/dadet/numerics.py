"""Dense float64 tensors with reverse-mode differentiation.

Each operation records its parents and a closure mapping the upstream gradient
to per-parent gradients. ``backward`` orders the recorded graph topologically
and replays it in reverse, visiting every node once.
"""
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_grad_enabled = True


@contextmanager
def no_grad():
    """Build no graph inside the block; results never require grad."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- bookkeeping --------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def requires_grad_(self, flag=True):
        self.requires_grad = bool(flag)
        if self.requires_grad and self.grad is None:
            self.grad = np.zeros_like(self.data)
        elif not self.requires_grad:
            self.grad = None
        return self

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------

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
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self, None)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op):
    _check_finite(data, op)
    if not (_grad_enabled and any(p.requires_grad for p in parents)):
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw, "mul")


def power(a, exponent):
    exponent = float(exponent)

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _node(a.data ** exponent, (a,), bw, "pow")


def relu(a):
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _node(a.data * mask, (a,), bw, "relu")


def exp(a):
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _node(out, (a,), bw, "exp")


def log(a):
    def bw(g):
        return (g / a.data,)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _node(out, (a,), bw, "log")


# -- shape ------------------------------------------------------------------


def reshape(a, shape):
    def bw(g):
        return (g.reshape(a.shape),)

    return _node(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a, axes=None):
    inv = None if axes is None else tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _node(a.data.transpose(axes), (a,), bw, "transpose")


def take(a, index):
    """Basic or advanced indexing; gradient scatters back with accumulation."""

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _node(a.data[index], (a,), bw, "take")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


# -- reductions and linear algebra -------------------------------------------


def tsum(a, axis=None, keepdims=False):
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def tmean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul expects (n,k)@(k,m), got {a.shape} @ {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def conv2d(x, w, stride=1, padding=0):
    """2-D cross-correlation of an NCHW input with an OIHW kernel."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input has {x.shape[1]} channels, kernel expects {w.shape[1]}"
        )
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} / padding={padding}")
    _, _, h, wd = x.shape
    kh, kw = w.shape[2:]
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (wd + 2 * padding - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {h}x{wd}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    xp = np.ascontiguousarray(xp)
    wk = np.ascontiguousarray(w.data)
    out = kernels.conv2d_forward(xp, wk, stride, out_h, out_w)

    def bw(g):
        gxp, gw = kernels.conv2d_backward(xp, wk, np.ascontiguousarray(g), stride)
        return gxp[:, :, padding:padding + h, padding:padding + wd], gw

    return _node(out, (x, w), bw, "conv2d")


# -- losses and normalisers ----------------------------------------------------


def _axis_check(a, axis):
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {a.shape}")


def softmax(a, axis=-1):
    a = as_tensor(a)
    _axis_check(a, axis)
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (a,), bw, "softmax")


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    _axis_check(a, axis)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), bw, "log_softmax")


def smooth_l1(pred, target):
    """Sum of 0.5*d**2 where |d| < 1 and |d| - 0.5 elsewhere."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1 shape mismatch: {pred.shape} vs {target.shape}")
    d = pred.data - target.data
    ad = np.abs(d)
    val = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5).sum()
    slope = np.clip(d, -1.0, 1.0)

    def bw(g):
        return g * slope, -g * slope

    return _node(np.asarray(val), (pred, target), bw, "smooth_l1")


# -- differentiation -----------------------------------------------------------


def _topological(root):
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
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor needing it."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    upstream = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        node.grad += g
        if node._backward is None:
            _check_finite(node.grad, "backward")
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in upstream:
                upstream[key] = upstream[key] + pg
            else:
                upstream[key] = np.asarray(pg, dtype=np.float64).reshape(parent.shape)


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple = None
    nonfinite: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.nonfinite


def grad_check(f, params, h=1e-5):
    """Compare reverse-mode gradients of ``f()`` against central differences.

    ``f`` takes no arguments and returns a scalar Tensor built from ``params``.
    Relative error per entry is ``|a - n| / max(1, |a|, |n|)``.
    """
    for p in params:
        p.requires_grad_(True)
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = [p.grad.copy() for p in params]

    report = GradCheckReport(0.0)
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        ga = analytic[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            try:
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
            except FloatingPointError:
                report.nonfinite.append((k, i))
                continue
            finally:
                flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                report.nonfinite.append((k, i))
                continue
            num = (fp - fm) / (2.0 * h)
            err = abs(ga[i] - num) / max(1.0, abs(ga[i]), abs(num))
            if err > report.max_rel_error:
                report.max_rel_error = err
                report.worst = (k, i)
    return report
