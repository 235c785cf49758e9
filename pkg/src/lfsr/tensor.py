"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the detector, generator and discriminator need are
provided. Each differentiable op records a :class:`Node` carrying a global
sequence number; :func:`backward` collects the nodes reachable from the loss
into a :class:`Tape` and replays them in exact reverse construction order.
Leaf gradients accumulate (``+=``) until :meth:`Tensor.zero_grad`.
"""

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from lfsr import kernels

_seq = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


@dataclass(eq=False)
class Node:
    seq: int
    op: str
    inputs: tuple
    out_id: int  # id() of the output tensor; a strong ref would make a cycle
    grad_fn: Callable


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

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
        return scale(self, -1.0)

    def __getitem__(self, index):
        return crop(self, index)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _make(data, inputs, grad_fn, op):
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(next(_seq), op, tuple(inputs), id(out), grad_fn)
    return out


@dataclass
class Tape:
    """Nodes reachable from a loss, in construction order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen = set()
        nodes = []
        stack = [loss]
        while stack:
            t = stack.pop()
            nd = t.node
            if nd is None or id(nd) in seen:
                continue
            seen.add(id(nd))
            nodes.append(nd)
            stack.extend(nd.inputs)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    if tape is None:
        tape = Tape.from_loss(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for nd in reversed(tape.nodes):
        g = grads.pop(nd.out_id, None)
        if g is None:
            continue
        in_grads = nd.grad_fn(g)
        for t, gi in zip(nd.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                k = id(t)
                grads[k] = gi if k not in grads else grads[k] + gi
    if loss.node is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
    return tape


# ----------------------------------------------------------------- elementwise

def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def scale(a, c: float):
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def sum(a, axis=None):  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), grad_fn, "sum")


def mean(a, axis=None):
    a = as_tensor(a)
    out = a.data.mean(axis=axis)
    n = a.data.size / max(out.size, 1)

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(out, (a,), grad_fn, "mean")


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def flatten(a):
    """(N, ...) -> (N, prod(...))."""
    return reshape(a, (a.shape[0], -1))


def crop(a, index):
    """Differentiable basic slicing."""
    a = as_tensor(a)
    out = a.data[index]

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make(np.array(out), (a,), grad_fn, "crop")


def concat(tensors: Sequence[Tensor], axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def grad_fn(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, grad_fn, "concat")


# ----------------------------------------------------------------- activations

def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x, slope=0.2):
    x = as_tensor(x)
    mask = x.data > 0
    factor = np.where(mask, 1.0, slope)
    return _make(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def prelu(x, alpha):
    """Parametric ReLU; ``alpha`` is a scalar or one slope per channel (axis 1)."""
    x, alpha = as_tensor(x), as_tensor(alpha)
    if alpha.size == 1:
        ab = alpha.data.reshape(())
    elif x.ndim >= 2 and alpha.shape == (x.shape[1],):
        ab = alpha.data.reshape((1, -1) + (1,) * (x.ndim - 2))
    else:
        raise ShapeError(f"prelu: alpha shape {alpha.shape} does not match channels of {x.shape}")
    pos = x.data > 0
    out = np.where(pos, x.data, ab * x.data)

    def grad_fn(g):
        gx = np.where(pos, g, ab * g)
        ga = np.where(pos, 0.0, g * x.data)
        if alpha.size == 1:
            ga = np.array(ga.sum()).reshape(alpha.shape)
        else:
            ga = ga.sum(axis=tuple(i for i in range(x.ndim) if i != 1))
        return gx, ga

    return _make(out, (x, alpha), grad_fn, "prelu")


def sigmoid(x):
    x = as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x):
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


# ------------------------------------------------------------------ layers

def _pad_amount(k, pad):
    if pad == "same":
        return k // 2
    if pad == "valid":
        return 0
    raise ValueError(f"pad must be 'same' or 'valid', got {pad!r}")


def conv2d(x, weight, bias=None, stride=1, pad="same"):
    """2-D cross-correlation, NCHW input, (F, C, kh, kw) weight."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, hgt, wid = x.shape
    f, cw, kh, kw = weight.shape
    if cw != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel dims must be odd, got {kh}x{kw}")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (f,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({f},)")
        inputs.append(bias)
    ph, pw = _pad_amount(kh, pad), _pad_amount(kw, pad)
    ho = (hgt + 2 * ph - kh) // stride + 1
    wo = (wid + 2 * pw - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hgt}x{wid}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else np.ascontiguousarray(x.data)
    cols = kernels.im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(f, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def grad_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = g2 @ wmat
            dxp = kernels.col2im(dcols, n, c, xp.shape[2], xp.shape[3], kh, kw, stride, ho, wo)
            gx = dxp[:, :, ph : ph + hgt, pw : pw + wid]
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(np.ascontiguousarray(out), inputs, grad_fn, "conv2d")


def batchnorm2d(x, gamma, beta, training, running_mean, running_var, momentum=0.9, eps=1e-5):
    """Per-channel batch normalization over (N, H, W).

    In training mode ``running_mean``/``running_var`` (numpy arrays) are
    updated in place: ``r = momentum * r + (1 - momentum) * batch``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects NCHW input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta must have shape ({c},)")
    axes = (0, 2, 3)
    bshape = (1, c, 1, 1)
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m < 2:
            raise ValueError("batchnorm2d: variance undefined for a single element per channel in training mode")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def grad_fn(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = inv.reshape(bshape) * (
                gxhat - gxhat.mean(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), grad_fn, "batchnorm2d")


def maxpool2d(x, k=2, stride=2):
    """Window maximum; gradient goes to the first row-major argmax of each window."""
    x = as_tensor(x)
    n, c, hgt, wid = x.shape
    if hgt % stride or wid % stride:
        raise ShapeError(f"maxpool2d: spatial dims {hgt}x{wid} not divisible by stride {stride}")
    ho = (hgt - k) // stride + 1
    wo = (wid - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        rows = (np.arange(ho) * stride)[:, None] + arg // k
        cols = (np.arange(wo) * stride)[None, :] + arg % k
        ni, ci = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
        np.add.at(gx, (ni[:, :, None, None], ci[:, :, None, None], rows, cols), g)
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), grad_fn, "maxpool2d")


def _shuffle(a, r):
    n, cr, hgt, wid = a.shape
    c = cr // (r * r)
    return a.reshape(n, c, r, r, hgt, wid).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, hgt * r, wid * r)


def _unshuffle(a, r):
    n, c, hr, wr = a.shape
    hgt, wid = hr // r, wr // r
    return a.reshape(n, c, hgt, r, wid, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, hgt, wid)


def pixel_shuffle(x, r):
    """(N, C*r*r, H, W) -> (N, C, H*r, W*r) with out[n,c,h*r+a,w*r+b] = in[n,c*r*r+a*r+b,h,w]."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] % (r * r):
        raise ShapeError(f"pixel_shuffle: channels of {x.shape} not divisible by r^2={r * r}")
    return _make(np.ascontiguousarray(_shuffle(x.data, r)), (x,), lambda g: (_unshuffle(g, r),), "pixel_shuffle")


def pixel_unshuffle(x, r):
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] % r or x.shape[3] % r:
        raise ShapeError(f"pixel_unshuffle: spatial dims of {x.shape} not divisible by {r}")
    return _make(np.ascontiguousarray(_unshuffle(x.data, r)), (x,), lambda g: (_shuffle(g, r),), "pixel_unshuffle")


def bilinear_matrix(n_in, scale):
    """(n_in*scale, n_in) interpolation matrix, align-corners false, edges clamped."""
    src = np.clip((np.arange(n_in * scale) + 0.5) / scale - 0.5, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_in * scale, n_in))
    rows = np.arange(n_in * scale)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def upsample_bilinear(x, scale):
    """Separable bilinear upsampling of (N, C, H, W) as two fixed matrix products."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample_bilinear expects (N, C, H, W), got {x.shape}")
    ar = bilinear_matrix(x.shape[2], scale)
    ac = bilinear_matrix(x.shape[3], scale)
    out = np.einsum("ih,nchw,jw->ncij", ar, x.data, ac, optimize=True)
    return _make(out, (x,), lambda g: (np.einsum("ih,ncij,jw->nchw", ar, g, ac, optimize=True),),
                 "upsample_bilinear")


def dense(x, weight, bias=None):
    """Affine map (N, K) @ (M, K).T + (M,)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"dense: bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data
        inputs.append(bias)

    def grad_fn(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        return (gx, gw) if bias is None else (gx, gw, g.sum(axis=0))

    return _make(out, inputs, grad_fn, "dense")


def global_avg_pool(x):
    """(N, C, H, W) -> (N, C)."""
    return mean(x, axis=(2, 3))


def mse_loss(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss: shapes differ {a.shape} vs {b.shape}")
    d = a.data - b.data
    n = d.size
    return _make(np.array(np.mean(d * d)), (a, b),
                 lambda g: (2.0 * g * d / n, -2.0 * g * d / n), "mse_loss")


def softmax(x, axis=-1):
    """Numerically stable softmax over ``axis`` (an int or tuple of ints)."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), grad_fn, "softmax")
