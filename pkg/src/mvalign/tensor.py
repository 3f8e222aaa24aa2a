"""Dense float64 tensors with reverse-mode gradients.

A forward op on tensors that require gradients records a node holding its
parents and a backward closure.  ``Tensor.backward`` walks the recorded graph
once in reverse topological order and then releases it, so a second call
without a fresh forward pass raises :class:`GraphError`.

Spatial ops take ``(N, C, H, W)`` batches; a single ``(C, H, W)`` image is
accepted too and is treated as a batch of one.
"""
import threading
from contextlib import contextmanager

import numpy as np

from . import kernels


class GraphError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_released")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64, copy=None)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._released = False

    # -- metadata -------------------------------------------------------
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
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- operators --------------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mul(tsum(self), 1.0 / self.size)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- reverse mode -------------------------------------------------------
    def topological_order(self):
        """Nodes reachable from ``self``, parents before children."""
        order, seen = [], set()
        stack = [(self, False)]
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

    def backward(self, grad=None):
        if self._released:
            raise GraphError("backward called twice on the same graph; run a new forward pass")
        if not self.requires_grad:
            raise GraphError("tensor does not require grad")
        if grad is None:
            if self.size != 1:
                raise GraphError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(self.topological_order()):
            g = grads.pop(id(node), None)
            if node.is_leaf:
                if g is not None and node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node._backward is None:
                raise GraphError(f"graph through '{node._op}' was already released")
            if g is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    prev = grads.get(id(parent))
                    grads[id(parent)] = pg if prev is None else prev + pg
            node._backward = None
            node._released = True
        self._released = True


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents, backward, op):
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise and structural ops

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _record(data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


elementwise_add = add


def neg(a):
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(data, (a, b), backward, "mul")


def square(a):
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def tsum(a):
    shape = a.shape
    return _record(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def sum_axes(a, axes):
    shape = a.shape
    data = a.data.sum(axis=axes, keepdims=True)
    return _record(data, (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum_axes")


def reshape(a, shape):
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape {old} -> {shape}") from exc
    return _record(data, (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors, axis=1):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat: incompatible shapes") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        sl = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return out

    return _record(data, tensors, backward, "concat")


def relu(a):
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (np.where(mask, g, 0.0),), "relu")


def smooth_l1(a):
    """Elementwise robust loss: 0.5 x^2 inside the unit interval, |x| - 0.5 outside."""
    x = a.data
    ax = np.abs(x)
    inner = ax < 1.0
    data = np.where(inner, 0.5 * x * x, ax - 0.5)
    return _record(data, (a,), lambda g: (g * np.where(inner, x, np.sign(x)),), "smooth_l1")


# --------------------------------------------------------------------------
# dense layers

def fully_connected(x, weight, bias=None):
    """``x @ weight.T + bias`` for ``x`` of shape (N, in) and ``weight`` (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"fully_connected: input {x.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    data = xd @ wd.T
    parents = [x, weight]
    if bias is not None:
        data = data + bias.data
        parents.append(bias)

    def backward(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _record(data, parents, backward, "fully_connected")


linear = fully_connected


def softmax(a):
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record(s, (a,), backward, "softmax")


def log_softmax(a):
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _record(out, (a,), backward, "log_softmax")


def cross_entropy(logits, labels, weights=None):
    """Per-row softmax cross-entropy, returned as an (N,) tensor.

    ``labels`` are integer class ids; ``weights`` optionally scales each row.
    """
    labels = np.asarray(labels, dtype=np.int64)
    lp = log_softmax(logits)
    n = logits.shape[0]
    picked_idx = (np.arange(n), labels)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    lpd = lp.data

    def backward(g):
        full = np.zeros_like(lpd)
        full[picked_idx] = -g * w
        return (full,)

    return _record(-lpd[picked_idx] * w, (lp,), backward, "cross_entropy")


# --------------------------------------------------------------------------
# spatial ops

def _batched(fn):
    """Lift a 4-D op to accept a single (C, H, W) image."""
    def wrapper(x, *args, **kwargs):
        if x.ndim == 3:
            out = fn(reshape(x, (1,) + x.shape), *args, **kwargs)
            return reshape(out, out.shape[1:])
        if x.ndim != 4:
            raise ShapeError(f"{fn.__name__}: expected 3-D or 4-D input, got {x.shape}")
        return fn(x, *args, **kwargs)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_batched
def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Zero-padded cross-correlation.  ``weight`` is (C_out, C_in, kH, kW)."""
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if cin != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {cin}")
    if stride < 1:
        raise ShapeError("conv2d: stride must be >= 1")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError("conv2d: kernel larger than padded input")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    wmat = weight.data.reshape(cout, -1)

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        cols = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
        padded_shape = None
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        padded_shape = xp.shape
        cols = kernels.im2col(np.ascontiguousarray(xp), kh, kw, stride)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    data = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    parents = [x, weight] + ([bias] if bias is not None else [])

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gm.T @ cols).reshape(weight.shape)
        grads = [None, gw]
        if x.requires_grad:
            dcols = gm @ wmat
            if padded_shape is None:
                grads[0] = dcols.reshape(n, h, w, c).transpose(0, 3, 1, 2)
            else:
                dxp = kernels.col2im(dcols, padded_shape, kh, kw, stride)
                grads[0] = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        if bias is not None:
            grads.append(gm.sum(axis=0))
        return grads

    return _record(np.ascontiguousarray(data), parents, backward, "conv2d")


@_batched
def maxpool2(x):
    """2x2 max pooling with stride 2."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial size {h}x{w} is not even")
    out, arg = kernels.maxpool2(np.ascontiguousarray(x.data))
    return _record(out, (x,), lambda g: (kernels.maxpool2_backward(np.ascontiguousarray(g), arg),), "maxpool2")


@_batched
def upsample2(x):
    """Nearest-neighbour 2x upsampling."""
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _record(data, (x,), backward, "upsample2")


@_batched
def batchnorm(x, gamma, beta, eps=1e-5, running_mean=None, running_var=None, training=True, momentum=0.1):
    """Per-channel normalisation over batch and spatial positions.

    In training mode the batch statistics are used and, when running buffers
    are passed, they are updated in place.  In inference mode the running
    buffers normalise the input.
    """
    if eps <= 0:
        raise ValueError("batchnorm: eps must be positive")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: gamma/beta must have shape ({c},)")
    xd = x.data
    gd = gamma.data.reshape(1, c, 1, 1)
    if training:
        mean = xd.mean(axis=(0, 2, 3), keepdims=True)
        xc = xd - mean
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        if running_mean is not None:
            m = xd.shape[0] * xd.shape[2] * xd.shape[3]
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean.reshape(c)
            running_var *= 1.0 - momentum
            running_var += momentum * var.reshape(c) * (m / max(m - 1, 1))
    else:
        mean = running_mean.reshape(1, c, 1, 1)
        xc = xd - mean
        var = running_var.reshape(1, c, 1, 1)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = gd * xhat + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gxhat = g * gd
            if training:
                gx = inv * (gxhat - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                            - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
            else:
                gx = gxhat * inv
        return gx, ggamma, gbeta

    return _record(data, (x, gamma, beta), backward, "batchnorm")


def masked_square_error(pred, target, weights):
    """``sum(weights * (pred - target)**2)`` with weights broadcast over trailing axes.

    The gradient is written with ``np.where`` so entries whose weight is zero
    receive an exact positive zero.
    """
    diff = pred.data - target
    w = np.broadcast_to(weights.reshape(weights.shape + (1,) * (pred.ndim - weights.ndim)), pred.shape)
    data = np.array((w * diff * diff).sum())

    def backward(g):
        return (np.where(w != 0.0, 2.0 * w * diff * g, 0.0),)

    return _record(data, (pred,), backward, "masked_square_error")
