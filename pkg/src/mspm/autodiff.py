"""Dense float32 tensors with reverse-mode differentiation on a tape.

Design notes:
  * storage is float32; reductions (conv, sums, means, variances) accumulate
    in float64 to keep finite-difference gradient checks tight
  * ops record onto the innermost active Tape only when some input requires
    grad; with no tape active a forward pass is plain numpy (eval mode)
  * gradients accumulate additively into Tensor.grad; callers zero them
"""

import hashlib

import numpy as np

from . import kernels
from .errors import InvalidArgument, NoGraph

_TAPES = []

# when set to a list, relu appends a digest of its sign pattern per call;
# the gradient checker uses it to detect finite-difference steps that cross
# a kink (where central differences are meaningless)
_KINK_LOG = None


class Tape:
    """Ordered record of executed ops for one backward sweep."""

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def clear(self):
        self.nodes.clear()
        self.consumed = False


def active_tape():
    return _TAPES[-1] if _TAPES else None


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tensor:
    """n-dimensional float32 array, optionally tracked on a tape."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # light operator sugar used by the loss/model code
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

    def __truediv__(self, s):
        if isinstance(s, Tensor):
            raise InvalidArgument("tensor/tensor division is not a primitive; divide by a scalar")
        return mul(self, 1.0 / float(s))


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _record(out, inputs, vjp):
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = tape
        tape.nodes.append(_Node(out, inputs, vjp))
    return out


def backward(loss):
    """Accumulate d(loss)/d(t) into t.grad for every tensor on loss's tape."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise InvalidArgument("backward requires a scalar loss tensor")
    tape = loss.node
    if tape is None:
        raise NoGraph("loss is not connected to any tape (detached or eval-mode forward)")
    if tape.consumed:
        raise NoGraph("tape already consumed by a previous backward sweep")
    seed = np.ones_like(loss.data)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=np.float32)
            t.grad = gi.copy() if t.grad is None else t.grad + gi
    tape.consumed = True
    tape.nodes.clear()


def _unbroadcast(g, shape):
    """Sum g down to `shape` (reverses numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.astype(np.float32)


# ---------------------------------------------------------------------------
# elementwise / structural primitives


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), vjp)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), vjp)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(out, (a, b), vjp)


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    orig = a.data.shape

    def vjp(g):
        return (g.reshape(orig),)

    return _record(out, (a,), vjp)


def flatten(a, start_axis=1):
    a = as_tensor(a)
    lead = a.data.shape[:start_axis]
    return reshape(a, lead + (-1,))


def transpose(a, axes):
    a = as_tensor(a)
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    inv = np.argsort(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return _record(out, (a,), vjp)


def broadcast_to(a, shape):
    a = as_tensor(a)
    out = Tensor(np.broadcast_to(a.data, shape))
    orig = a.data.shape

    def vjp(g):
        return (_unbroadcast(g, orig),)

    return _record(out, (a,), vjp)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].ndim
    if axis < -nd or axis >= nd:
        raise InvalidArgument(f"concat axis {axis} out of range for {nd}-d tensors")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), vjp)


def slice_tensor(a, key):
    """Basic (view-style) indexing; gradient scatters back into zeros."""
    a = as_tensor(a)
    out = Tensor(a.data[key])
    shape = a.data.shape

    def vjp(g):
        gx = np.zeros(shape, np.float32)
        gx[key] = g
        return (gx,)

    return _record(out, (a,), vjp)


def index_select(a, idx):
    """Select rows along axis 0; duplicate indices accumulate gradient."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0 or idx.min() < 0 or idx.max() >= a.data.shape[0]:
        raise InvalidArgument("index_select indices out of range")
    out = Tensor(a.data[idx])
    shape = a.data.shape

    def vjp(g):
        gx = np.zeros(shape, np.float32)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record(out, (a,), vjp)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    if _KINK_LOG is not None:
        _KINK_LOG.append(hashlib.sha1(np.packbits(mask).tobytes()).digest())
    out = Tensor(np.maximum(a.data, 0.0))

    def vjp(g):
        return (g * mask,)

    return _record(out, (a,), vjp)


def vsum(a, axis=None, keepdims=False):
    """Sum with float64 accumulation."""
    a = as_tensor(a)
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64))
    shape = a.data.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g.reshape((1,) * len(shape)), shape),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).astype(np.float32),)

    return _record(out, (a,), vjp)


def vmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.data.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def safe_sqrt(a, eps=1e-12):
    """sqrt with negative radicands clamped to 0 and a floored gradient."""
    a = as_tensor(a)
    r = np.sqrt(np.maximum(a.data, 0.0))
    out = Tensor(r)
    pos = a.data > 0

    def vjp(g):
        return (g * pos * (0.5 / np.maximum(r, eps)),)

    return _record(out, (a,), vjp)


def softmax(a, axis=-1):
    a = as_tensor(a)
    nd = a.ndim
    if axis < -nd or axis >= nd:
        raise InvalidArgument(f"softmax axis {axis} out of range")
    z = a.data.astype(np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = (e / e.sum(axis=axis, keepdims=True)).astype(np.float32)
    out = Tensor(y)

    def vjp(g):
        dot = np.sum(g.astype(np.float64) * y, axis=axis, keepdims=True)
        return ((y * (g - dot)).astype(np.float32),)

    return _record(out, (a,), vjp)


def layernorm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise InvalidArgument("layernorm scale/shift must match the last axis")
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def vjp(g):
        gd = g.astype(np.float64)
        dxhat = gd * gamma.data
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        ggamma = (gd * xhat).sum(axis=red)
        gbeta = gd.sum(axis=red)
        return gx.astype(np.float32), ggamma.astype(np.float32), gbeta.astype(np.float32)

    return _record(out, (x, gamma, beta), vjp)


def l2_normalize(a, eps=1e-12):
    """Scale the last axis to unit Euclidean norm (inputs below eps are scaled by 1/eps)."""
    a = as_tensor(a)
    xd = a.data.astype(np.float64)
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    ok = norm > eps
    denom = np.where(ok, norm, eps)
    y = xd / denom
    out = Tensor(y)

    def vjp(g):
        gd = g.astype(np.float64)
        dot = (gd * y).sum(axis=-1, keepdims=True)
        gx = np.where(ok, (gd - y * dot) / denom, gd / eps)
        return (gx.astype(np.float32),)

    return _record(out, (a,), vjp)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise InvalidArgument("matmul requires tensors with at least 2 axes")
    out = Tensor(a.data.astype(np.float64) @ b.data.astype(np.float64))
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ bd.swapaxes(-1, -2)
        gb = ad.swapaxes(-1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record(out, (a, b), vjp)


def linear(x, w, b):
    """x @ w.T + b over the last axis; x may carry arbitrary leading axes."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.shape[-1] != w.data.shape[1]:
        raise InvalidArgument(
            f"linear: input features {x.data.shape[-1]} != weight fan-in {w.data.shape[1]}")
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, x.data.shape[-1])
    y = x2.astype(np.float64) @ w.data.T.astype(np.float64) + b.data
    out = Tensor(y.reshape(lead + (w.data.shape[0],)))
    wd = w.data

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(x.data.shape)
        gw = g2.T.astype(np.float64) @ x2.astype(np.float64)
        gb = g2.sum(axis=0, dtype=np.float64)
        return gx, gw.astype(np.float32), gb.astype(np.float32)

    return _record(out, (x, w, b), vjp)


def dropout(a, p, rng):
    """Inverted dropout; call only in train mode with an explicit generator."""
    a = as_tensor(a)
    if not 0.0 <= p < 1.0:
        raise InvalidArgument("dropout rate must lie in [0, 1)")
    if p == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p).astype(np.float32) / (1.0 - p)
    out = Tensor(a.data * keep)

    def vjp(g):
        return (g * keep,)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# image primitives


def conv2d(x, w, b, stride=1, pad=0, dilation=1):
    """Cross-correlation over NCHW input with OIHW filters."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 4 or w.ndim != 4:
        raise InvalidArgument("conv2d expects NCHW input and OIHW weight")
    n, c, h, wth = x.data.shape
    co, ci, kh, kw = w.data.shape
    if ci != c:
        raise InvalidArgument(f"conv2d: input channels {c} != weight channels {ci}")
    if b.data.shape != (co,):
        raise InvalidArgument("conv2d: bias must have one entry per output channel")
    if kh < 1 or kw < 1 or stride < 1 or pad < 0 or dilation < 0:
        raise InvalidArgument("conv2d: kernel/stride must be >= 1, pad/dilation >= 0")
    ho = kernels.conv_out_size(h, kh, stride, pad, dilation)
    wo = kernels.conv_out_size(wth, kw, stride, pad, dilation)
    if ho < 1 or wo < 1:
        raise InvalidArgument(f"conv2d: output size {ho}x{wo} collapsed below 1")
    recording = active_tape() is not None and (x.requires_grad or w.requires_grad
                                               or b.requires_grad)
    cols = None
    if recording and kernels.conv2d_forward_with_cols is not None:
        y, cols = kernels.conv2d_forward_with_cols(x.data, w.data, stride, pad, dilation)
    else:
        y = kernels.conv2d_forward(x.data, w.data, stride, pad, dilation)
    out = Tensor(y + b.data.reshape(1, -1, 1, 1))
    xd, wd = x.data, w.data

    def vjp(g):
        g = np.ascontiguousarray(g)
        gx = kernels.conv2d_backward_input(g, wd, xd.shape, stride, pad, dilation)
        if cols is not None:
            gw = kernels.conv2d_backward_weight_from_cols(g, cols, wd.shape)
        else:
            gw = kernels.conv2d_backward_weight(g, xd, wd.shape, stride, pad, dilation)
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
        return gx, gw, gb

    return _record(out, (x, w, b), vjp)


def batchnorm2d(x, gamma, beta, running_mean, running_var, training,
                eps=1e-5, momentum=0.1):
    """Per-channel batch normalization over NCHW.

    Train mode normalizes by batch statistics (biased variance) and updates
    the running buffers in place with an exponential moving average (the
    running variance uses the unbiased estimate). Eval mode normalizes by
    the running buffers.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise InvalidArgument("batchnorm2d expects NCHW input")
    n, c, h, w = x.data.shape
    m = n * h * w
    if training:
        if m < 2:
            raise InvalidArgument("batchnorm2d train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
        sq = np.square(x.data - mu.reshape(1, -1, 1, 1).astype(np.float32))
        var = sq.mean(axis=(0, 2, 3), dtype=np.float64)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * (var * m / max(m - 1, 1)).astype(running_var.dtype)
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.astype(np.float32).reshape(1, -1, 1, 1)) \
        * inv.astype(np.float32).reshape(1, -1, 1, 1)
    out = Tensor(xhat * gamma.data.reshape(1, -1, 1, 1) + beta.data.reshape(1, -1, 1, 1))

    def vjp(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
        gbeta = g.sum(axis=(0, 2, 3), dtype=np.float64)
        dxhat = g * gamma.data.reshape(1, -1, 1, 1)
        inv32 = inv.astype(np.float32).reshape(1, -1, 1, 1)
        if training:
            mean_d = dxhat.mean(axis=(0, 2, 3), dtype=np.float64, keepdims=True)
            mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3), dtype=np.float64, keepdims=True)
            gx = inv32 * (dxhat - mean_d.astype(np.float32)
                          - xhat * mean_dx.astype(np.float32))
        else:
            gx = dxhat * inv32
        return gx.astype(np.float32), ggamma.astype(np.float32), gbeta.astype(np.float32)

    return _record(out, (x, gamma, beta), vjp)


def adaptive_avg_pool2d(x, out_h, out_w):
    """Average-pool NCHW input onto an out_h x out_w grid of adaptive bins."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise InvalidArgument("adaptive_avg_pool2d expects NCHW input")
    n, c, h, w = x.data.shape
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise InvalidArgument(
            f"adaptive_avg_pool2d: target {out_h}x{out_w} out of range for {h}x{w}")
    out = Tensor(kernels.adaptive_avgpool_forward(x.data, out_h, out_w))

    def vjp(g):
        return (kernels.adaptive_avgpool_backward(np.ascontiguousarray(g), h, w),)

    return _record(out, (x,), vjp)
