"""Dense NCHW tensors with tape-based reverse-mode differentiation.

Every differentiable operation records its inputs and a backward rule on the
tensor it produces. ``backward`` walks the recorded operations reachable from
a scalar loss in reverse execution order, visiting each once, and then
releases them; a consumed tape cannot be replayed.

Float32 is the working precision. Float64 arrays passed in explicitly are
kept as float64, which is how gradients are checked against finite
differences.
"""

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, LabelError, ShapeError

_counter = itertools.count()


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64 and isinstance(data, np.ndarray):
        return arr
    return arr.astype(np.float32, copy=False)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._id = next(_counter)
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None and not self._consumed

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self):
        backward(self)

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

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _result(data, parents, rule):
    """Build an output tensor; ``rule(g)`` returns one gradient per parent."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._id = next(_counter)
    out._consumed = False
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = rule
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(loss):
    """Populate ``.grad`` of every leaf that requires grad and feeds ``loss``.

    Gradients accumulate into existing leaf buffers. Intermediate tensors do
    not keep gradients.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss._consumed:
        raise ContractError("this computation tape has already been consumed by backward()")
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")

    nodes = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in nodes:
            continue
        if node._consumed:
            raise ContractError("graph contains operations from an already consumed tape")
        nodes[node._id] = node
        stack.extend(p for p in node._parents if p.requires_grad)

    grads = {loss._id: np.ones_like(loss.data)}
    for key in sorted(nodes, reverse=True):
        node = nodes[key]
        g = grads.pop(key, None)
        if node._backward is None:
            if g is not None:
                g = g.reshape(node.data.shape)
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg
        node._backward = None
        node._parents = ()
        node._consumed = True


# elementwise ---------------------------------------------------------------

def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _wrap(b, a)
    b = _wrap(b)
    return _wrap(a, b), b


def add(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a = _wrap(a)
    if not isinstance(b, Tensor):
        c = b
        return _result(a.data * c, (a,), lambda g: (g * c,))
    sa, sb = a.shape, b.shape
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)))


def relu(x):
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def clamp(x, lo=None, hi=None):
    """Clamp with the true (piecewise) gradient: zero where clamped."""
    out = np.clip(x.data, lo, hi)
    mask = out == x.data
    return _result(out, (x,), lambda g: (g * mask,))


def clamp_st(x, lo=None, hi=None):
    """Clamp whose backward is the identity (straight-through)."""
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g,))


# reductions and reshaping -----------------------------------------------------

def tsum(x, axis=None):
    shape = x.shape

    def rule(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis)), (x,), rule)


def mean(x, axis=None):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis), x.dtype.type(1.0 / n))


def reshape(x, shape):
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def flatten(x):
    return reshape(x, (x.shape[0], -1))


# layers ----------------------------------------------------------------------

def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """Cross-correlation of ``x[B,C,H,W]`` with ``kernel[K,C,kh,kw]``."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    B, C, H, W = x.shape
    K, Ck, kh, kw = kernel.shape
    if C != Ck:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if bias is not None and bias.shape != (K,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} / padding={padding}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ShapeError(f"kernel {kernel.shape} larger than padded input {x.shape} (padding={padding})")
    if (Hp - kh) % stride or (Wp - kw) % stride:
        raise ShapeError(f"conv2d output size is not integral for input {x.shape}, kernel {kernel.shape}, "
                         f"stride={stride}, padding={padding}")
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, K, 1, 1)
    out = np.ascontiguousarray(out)

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def rule(g):
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            cols = np.tensordot(g, kernel.data, axes=([1], [0]))  # B,Ho,Wo,C,kh,kw
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return (gx, gk) if bias is None else (gx, gk, gb)

    return _result(out, parents, rule)


def _pool_view(x, k, op):
    if x.data.ndim != 4:
        raise ShapeError(f"{op} expects a 4-d input, got {x.shape}")
    B, C, H, W = x.shape
    if k < 1 or H % k or W % k:
        raise ShapeError(f"{op} window {k} does not divide spatial dims of {x.shape}")
    Ho, Wo = H // k, W // k
    return x.data.reshape(B, C, Ho, k, Wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, k * k)


def maxpool2d(x, k=2):
    """Non-overlapping k×k max pooling; ties route the gradient to the first maximum."""
    cols = _pool_view(x, k, "maxpool2d")
    idx = cols.argmax(axis=-1)[..., None]
    out = np.take_along_axis(cols, idx, axis=-1)[..., 0]
    B, C, H, W = x.shape

    def rule(g):
        gc = np.zeros(cols.shape, dtype=g.dtype)
        np.put_along_axis(gc, idx, g[..., None], axis=-1)
        gc = gc.reshape(B, C, H // k, W // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gc,)

    return _result(out, (x,), rule)


def avgpool2d(x, k=2):
    cols = _pool_view(x, k, "avgpool2d")
    out = cols.mean(axis=-1).astype(x.dtype)
    scale = x.dtype.type(1.0 / (k * k))

    def rule(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) * scale,)

    return _result(out, (x,), rule)


def linear(x, weight, bias=None):
    """Affine map ``x @ weight.T + bias`` for ``x[B,in]``, ``weight[out,in]``."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear shape mismatch: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias shape {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def rule(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if bias.requires_grad else None)

    return _result(out, parents, rule)


def log_softmax(x, axis=1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    soft = np.exp(out)
    return _result(out, (x,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def _check_labels(labels, batch, classes):
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise LabelError(f"labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def nll_loss(log_probs, labels):
    """Mean negative log-likelihood of the true labels."""
    if log_probs.data.ndim != 2:
        raise ShapeError(f"nll_loss expects [batch, classes] log-probs, got {log_probs.shape}")
    B, classes = log_probs.shape
    labels = _check_labels(labels, B, classes)
    rows = np.arange(B)
    out = np.asarray(-log_probs.data[rows, labels].mean())

    def rule(g):
        gl = np.zeros_like(log_probs.data)
        gl[rows, labels] = -g / B
        return (gl,)

    return _result(out, (log_probs,), rule)


def cw_margin(logits, labels, kappa=0.0):
    """Mean of ``max(z_y - max_{j != y} z_j, -kappa)`` over the batch."""
    if logits.data.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"cw_margin expects [batch, classes>=2] logits, got {logits.shape}")
    B, classes = logits.shape
    labels = _check_labels(labels, B, classes)
    rows = np.arange(B)
    z = logits.data
    others = z.copy()
    others[rows, labels] = -np.inf
    runner = others.argmax(axis=1)
    margin = z[rows, labels] - z[rows, runner]
    active = margin > -kappa
    out = np.asarray(np.maximum(margin, -kappa).mean(), dtype=z.dtype)

    def rule(g):
        gl = np.zeros_like(z)
        w = (g / B) * active
        gl[rows, labels] += w
        gl[rows, runner] -= w
        return (gl,)

    return _result(out, (logits,), rule)
