"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every primitive computes its forward value eagerly and, when any input
requires a gradient, appends a node (op name, inputs, vector-Jacobian
closure) to the active :class:`Tape`. Nodes are appended in execution order,
so the tape is topologically sorted by construction and :func:`backward`
is a single reverse sweep.
"""

import contextlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _kernels
from .errors import ContractError, NumericFault, ShapeError

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True
_STRICT = False
_MAC_COUNTER: Optional[list] = None


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float64, np.float32):
        raise ContractError(f"unsupported compute dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return np.dtype(_DEFAULT_DTYPE)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording tape nodes."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def strict(enabled=True):
    """Raise :class:`NumericFault` whenever a primitive produces a non-finite value."""
    global _STRICT
    prev, _STRICT = _STRICT, enabled
    try:
        yield
    finally:
        _STRICT = prev


def is_strict():
    return _STRICT


@contextlib.contextmanager
def count_macs():
    """Tally multiply-accumulates performed by conv2d and matmul.

    Yields a one-element list whose entry holds the running total.
    """
    global _MAC_COUNTER
    prev, _MAC_COUNTER = _MAC_COUNTER, [0]
    try:
        yield _MAC_COUNTER
    finally:
        _MAC_COUNTER = prev


@dataclass(frozen=True)
class NodeId:
    generation: int
    index: int


@dataclass
class Node:
    op: str
    inputs: tuple
    vjp: Callable
    needs: tuple = ()
    retain: object = None


@dataclass
class Tape:
    """Ordered record of differentiable operations."""

    nodes: list = field(default_factory=list)
    generation: int = 0
    op_counts: Counter = field(default_factory=Counter)

    def record(self, op, inputs, vjp):
        inputs = tuple(inputs)
        self.nodes.append(Node(op, inputs, vjp, tuple(t.requires_grad for t in inputs)))
        self.op_counts[op] += 1
        return NodeId(self.generation, len(self.nodes) - 1)

    def clear(self):
        # bumping the generation invalidates every outstanding NodeId at once
        self.nodes = []
        self.generation += 1
        self.op_counts = Counter()

    def __len__(self):
        return len(self.nodes)


_TAPE = Tape()


def get_tape():
    return _TAPE


def clear_tape():
    _TAPE.clear()


class Tensor:
    """An ndarray value with an optional gradient slot and tape identity."""

    __array_priority__ = 100
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.name = name

    # -- introspection -----------------------------------------------------
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
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- autodiff helpers --------------------------------------------------
    def detach(self):
        return detach(self)

    def backward(self):
        backward(self)

    def retain_grad(self):
        """Keep this intermediate's gradient in ``.grad`` after backward."""
        if self.node is None:
            return self
        _check_live(self)
        _TAPE.nodes[self.node.index].retain = self
        return self

    def zero_grad(self):
        self.grad = None

    # -- operators ---------------------------------------------------------
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

    def __pow__(self, exponent):
        if exponent == 2:
            return square(self)
        if exponent == 0.5:
            return sqrt(self)
        raise ContractError(f"unsupported power {exponent!r}; use square or sqrt")

    def __getitem__(self, key):
        return getitem(self, key)

    # -- method forms ------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def parameter(data, name=None):
    return Tensor(np.asarray(data, dtype=_DEFAULT_DTYPE), requires_grad=True, name=name)


def _check_live(t):
    if t.node is not None and t.node.generation != _TAPE.generation:
        raise ContractError("tensor belongs to a cleared tape; recompute it or detach it first")


def _make(op, inputs, out_data, vjp):
    out_data = np.asarray(out_data)
    if _STRICT and np.issubdtype(out_data.dtype, np.floating) and not np.all(np.isfinite(out_data)):
        raise NumericFault(op, f"output shape {out_data.shape}")
    needs = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = needs
    out.grad = None
    out.node = None
    out.name = None
    if needs:
        for t in inputs:
            if t.requires_grad:
                _check_live(t)
        out.node = _TAPE.record(op, inputs, vjp)
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


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, [a.shape, b.shape]) from None


# --------------------------------------------------------------------------
# elementwise arithmetic
# --------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", (a, b), a.data + b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", (a, b), a.data - b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    ra, rb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (
            _unbroadcast(g * bd, ad.shape) if ra else None,
            _unbroadcast(g * ad, bd.shape) if rb else None,
        )

    return _make("mul", (a, b), ad * bd, vjp)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    ra, rb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (
            _unbroadcast(g / bd, ad.shape) if ra else None,
            _unbroadcast(-g * out / bd, bd.shape) if rb else None,
        )

    return _make("div", (a, b), out, vjp)


def neg(a):
    a = as_tensor(a)
    return _make("neg", (a,), -a.data, lambda g: (-g,))


def square(a):
    a = as_tensor(a)
    ad = a.data
    return _make("square", (a,), ad * ad, lambda g: (2.0 * ad * g,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make("sqrt", (a,), out, lambda g: (g / (2.0 * out),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", (a,), out, lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    ad = a.data
    return _make("log", (a,), np.log(ad), lambda g: (g / ad,))


def maximum_scalar(a, floor):
    """Elementwise ``max(a, floor)``; gradient passes where ``a >= floor``."""
    a = as_tensor(a)
    mask = a.data >= floor
    return _make("maximum_scalar", (a,), np.maximum(a.data, floor), lambda g: (g * mask,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", (a,), a.data * mask, lambda g: (g * mask,))


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _make("leaky_relu", (a,), a.data * scale, lambda g: (g * scale,))


# --------------------------------------------------------------------------
# reductions and shape ops
# --------------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", (a,), a.data.sum(axis=axes, keepdims=keepdims), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([shape[ax] for ax in axes])) if axes else 1

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make("mean", (a,), a.data.mean(axis=axes, keepdims=keepdims), vjp)


def l2_norm(a, axis=-1, keepdims=False):
    """Euclidean norm along ``axis``. The gradient at a zero vector is taken as zero."""
    a = as_tensor(a)
    ad = a.data
    out = np.sqrt((ad * ad).sum(axis=axis, keepdims=True))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * ad / safe, 0.0),)

    return _make("l2_norm", (a,), out if keepdims else np.squeeze(out, axis=axis), vjp)


def reshape(a, shape):
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", [src, shape]) from None
    return _make("reshape", (a,), out, lambda g: (g.reshape(src),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inv),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", [t.shape for t in tensors], f"axis={axis}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _make("concat", tuple(tensors), out, vjp)


def getitem(a, key):
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, key, g)
        return (full,)

    return _make("getitem", (a,), a.data[key], vjp)


# --------------------------------------------------------------------------
# linear algebra, convolution, pooling
# --------------------------------------------------------------------------


def matmul(a, b):
    """2-D matrix product, or batched 3-D product with equal batch extents."""
    a, b = as_tensor(a), as_tensor(b)
    ok = (a.ndim == b.ndim == 2 and a.shape[1] == b.shape[0]) or (
        a.ndim == b.ndim == 3 and a.shape[0] == b.shape[0] and a.shape[2] == b.shape[1]
    )
    if not ok:
        raise ShapeError("matmul", [a.shape, b.shape])
    ad, bd = a.data, b.data
    if _MAC_COUNTER is not None:
        _MAC_COUNTER[0] += int(np.prod(ad.shape)) * bd.shape[-1]
    ra, rb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (
            g @ np.swapaxes(bd, -1, -2) if ra else None,
            np.swapaxes(ad, -1, -2) @ g if rb else None,
        )

    return _make("matmul", (a, b), ad @ bd, vjp)


def conv2d(x, w, stride=1, padding=0):
    """Cross-correlation of (B, C, H, W) input with (O, C, kh, kw) kernels."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", [x.shape, w.shape])
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    hp, wp = H + 2 * padding, W + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError("conv2d", [x.shape, w.shape], "kernel larger than padded input")
    xd = x.data
    if padding:
        xp = np.zeros((B, C, hp, wp), dtype=xd.dtype)
        xp[:, :, padding : padding + H, padding : padding + W] = xd
    else:
        xp = xd
    cols = _kernels.im2col(xp, kh, kw, stride)
    ho, wo = cols.shape[4], cols.shape[5]
    cols3 = cols.reshape(B, C * kh * kw, ho * wo)
    wmat = w.data.reshape(O, C * kh * kw)
    out = np.matmul(wmat, cols3).reshape(B, O, ho, wo)
    if _MAC_COUNTER is not None:
        _MAC_COUNTER[0] += B * ho * wo * O * C * kh * kw
    rx, rw = x.requires_grad, w.requires_grad

    def vjp(g):
        g3 = g.reshape(B, O, ho * wo)
        gw = np.matmul(g3, cols3.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if rw else None
        gx = None
        if rx:
            gcols = np.matmul(wmat.T, g3).reshape(B, C, kh, kw, ho, wo)
            gxp = _kernels.col2im(gcols, hp, wp, stride)
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return gx, gw

    return _make("conv2d", (x, w), out, vjp)


def max_pool2d(x, kernel=2, stride=None):
    x = as_tensor(x)
    stride = stride or kernel
    if x.ndim != 4 or x.shape[2] < kernel or x.shape[3] < kernel:
        raise ShapeError("max_pool2d", [x.shape], f"kernel={kernel}")
    out, idx = _kernels.maxpool_forward(x.data, kernel, stride)
    shape = x.shape
    return _make("max_pool2d", (x,), out, lambda g: (_kernels.maxpool_backward(g, idx, shape, kernel, stride),))


def avg_pool2d(x, kernel=2, stride=None):
    x = as_tensor(x)
    stride = stride or kernel
    if x.ndim != 4 or x.shape[2] < kernel or x.shape[3] < kernel:
        raise ShapeError("avg_pool2d", [x.shape], f"kernel={kernel}")
    B, C, H, W = x.shape
    cols = _kernels.im2col(x.data, kernel, kernel, stride)
    out = cols.mean(axis=(2, 3))
    ho, wo = out.shape[2], out.shape[3]
    area = kernel * kernel

    def vjp(g):
        gc = np.broadcast_to((g / area)[:, :, None, None], (B, C, kernel, kernel, ho, wo))
        return (_kernels.col2im(np.ascontiguousarray(gc), H, W, stride),)

    return _make("avg_pool2d", (x,), out, vjp)


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization of (B, C, H, W) or (B, C) input.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place (unbiased variance); otherwise the running
    buffers are used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim not in (2, 4) or gamma.shape != (x.shape[1],):
        raise ShapeError("batch_norm", [x.shape, gamma.shape])
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    bshape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    xd = x.data
    if training:
        m = xd.size // xd.shape[1]
        mu = xd.mean(axis=axes)
        xc = xd - mu.reshape(bshape)
        var = (xc * xc).mean(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
        xc = xd - mu.reshape(bshape)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)
    rx, rg, rb = x.requires_grad, gamma.requires_grad, beta.requires_grad

    def vjp(g):
        ggamma = (g * xhat).sum(axis=axes) if rg else None
        gbeta = g.sum(axis=axes) if rb else None
        gx = None
        if rx:
            gxhat = g * gd
            if training:
                mg = gxhat.mean(axis=axes).reshape(bshape)
                mgx = (gxhat * xhat).mean(axis=axes).reshape(bshape)
                gx = (gxhat - mg - xhat * mgx) * inv.reshape(bshape)
            else:
                gx = gxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return _make("batch_norm", (x, gamma, beta), out, vjp)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalization over the last axis with elementwise affine parameters."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError("layer_norm", [x.shape, gamma.shape, beta.shape])
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    rx, rg, rb = x.requires_grad, gamma.requires_grad, beta.requires_grad

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if rg else None
        gbeta = g.sum(axis=lead) if rb else None
        gx = None
        if rx:
            gxhat = g * gamma.data
            gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _make("layer_norm", (x, gamma, beta), out, vjp)


# --------------------------------------------------------------------------
# detach, apply, backward
# --------------------------------------------------------------------------


def detach(t):
    """Same values, no gradient: an exact barrier for differentiation."""
    t = as_tensor(t)
    out = Tensor(t.data)
    out.name = t.name
    return out


_PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "square": square,
    "sqrt": sqrt,
    "exp": exp,
    "log": log,
    "maximum_scalar": maximum_scalar,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sum": sum_,
    "mean": mean,
    "l2_norm": l2_norm,
    "reshape": reshape,
    "transpose": transpose,
    "concat": lambda *ts, **kw: concat(ts, **kw),
    "getitem": getitem,
    "matmul": matmul,
    "conv2d": conv2d,
    "max_pool2d": max_pool2d,
    "avg_pool2d": avg_pool2d,
    "batch_norm": batch_norm,
    "layer_norm": layer_norm,
}


def apply(op_kind, inputs, **attrs):
    """Apply a primitive by name, e.g. ``apply("conv2d", [x, w], stride=1)``."""
    try:
        fn = _PRIMITIVES[op_kind]
    except KeyError:
        raise ContractError(f"unknown primitive {op_kind!r}") from None
    return fn(*inputs, **attrs)


def primitive_names():
    return sorted(_PRIMITIVES)


def backward(loss):
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``.

    Gradients accumulate additively into leaves that already hold a grad.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward() needs a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a single-element loss, got shape {loss.shape}")
    if loss.node is None:
        raise ContractError("backward() on a tensor with no tape node (detached or constant)")
    _check_live(loss)
    nodes = _TAPE.nodes
    grads = {loss.node.index: np.ones_like(loss.data)}
    for idx in range(loss.node.index, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        node = nodes[idx]
        if node.retain is not None:
            node.retain.grad = g.copy() if node.retain.grad is None else node.retain.grad + g
        in_grads = node.vjp(g)
        for inp, need, ig in zip(node.inputs, node.needs, in_grads):
            if ig is None or not need:
                continue
            if inp.node is not None:
                j = inp.node.index
                prev = grads.get(j)
                grads[j] = ig if prev is None else prev + ig
            elif inp.grad is None:
                inp.grad = np.array(ig, dtype=inp.data.dtype, copy=True)
            else:
                inp.grad = inp.grad + ig
