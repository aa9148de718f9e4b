"""Parameter registry, initialization, and the transformer building blocks."""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointMismatch, InvalidArgument

# initialization rules, keyed by the kind given at declaration time
#   conv    normal(0, sqrt(2 / (c_in*kh*kw)))
#   linear  normal(0, sqrt(2 / fan_in))
#   zero    biases, batchnorm/layernorm shifts
#   one     batchnorm/layernorm scales
#   embed   positional encodings and the aggregation token, normal(0, 0.02)
_KINDS = ("conv", "linear", "zero", "one", "embed")


class ParamStore:
    """Ordered name -> tensor registry; iteration order is checkpoint identity.

    Trainable tensors are declared with a slash-delimited path and an init
    kind; non-trainable buffers (batchnorm running stats) live in a second
    ordered map and are serialized after the parameters.
    """

    def __init__(self):
        self._params = {}
        self._kinds = {}
        self._buffers = {}

    def declare(self, name, shape, kind):
        if name in self._params or name in self._buffers:
            raise InvalidArgument(f"parameter {name!r} declared twice")
        if kind not in _KINDS:
            raise InvalidArgument(f"unknown init kind {kind!r}")
        t = Tensor(np.zeros(shape, np.float32), requires_grad=True)
        self._params[name] = t
        self._kinds[name] = kind
        return t

    def declare_buffer(self, name, shape, fill=0.0):
        if name in self._params or name in self._buffers:
            raise InvalidArgument(f"buffer {name!r} declared twice")
        buf = np.full(shape, fill, np.float32)
        self._buffers[name] = buf
        return buf

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def buffer(self, name):
        return self._buffers[name]

    def params(self):
        return self._params.items()

    def buffers(self):
        return self._buffers.items()

    def n_params(self):
        return sum(t.size for t in self._params.values())

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def named_tensors(self):
        """Parameters then buffers, in declaration order (checkpoint layout)."""
        for name, t in self._params.items():
            yield name, t.data
        for name, buf in self._buffers.items():
            yield name, buf

    def load_arrays(self, named_arrays):
        """Install tensors saved by named_tensors(); any mismatch is fatal."""
        expected = list(self.named_tensors())
        if len(named_arrays) != len(expected):
            raise CheckpointMismatch(
                f"checkpoint holds {len(named_arrays)} tensors, model declares {len(expected)}")
        for (name, arr), (want_name, want) in zip(named_arrays, expected):
            if name != want_name:
                raise CheckpointMismatch(
                    f"checkpoint tensor {name!r} where model expects {want_name!r}")
            if tuple(arr.shape) != tuple(want.shape):
                raise CheckpointMismatch(
                    f"tensor {name!r}: checkpoint shape {tuple(arr.shape)} != "
                    f"model shape {tuple(want.shape)}")
        for name, arr in named_arrays:
            if name in self._params:
                self._params[name].data[...] = arr
            else:
                self._buffers[name][...] = arr


def init_params(store, seed):
    """Fill a declared store in declaration order; deterministic per seed."""
    rng = np.random.default_rng(seed)
    for name, t in store.params():
        kind = store._kinds[name]
        if kind == "zero":
            t.data[...] = 0.0
        elif kind == "one":
            t.data[...] = 1.0
        elif kind == "embed":
            t.data[...] = rng.normal(0.0, 0.02, t.shape).astype(np.float32)
        else:
            fan_in = int(np.prod(t.shape[1:]))
            std = math.sqrt(2.0 / fan_in)
            t.data[...] = rng.normal(0.0, std, t.shape).astype(np.float32)


@dataclass
class EncoderLayerConfig:
    model_dim: int
    heads: int
    ffn_dim: int
    dropout: float = 0.0

    def __post_init__(self):
        if self.heads < 1:
            raise InvalidArgument("encoder needs at least one head")
        if self.model_dim % self.heads:
            raise InvalidArgument(
                f"model_dim {self.model_dim} not divisible by {self.heads} heads")


def declare_attention(store, prefix, dim):
    for mat in ("wq", "wk", "wv", "wo"):
        store.declare(f"{prefix}/{mat}", (dim, dim), "linear")
        store.declare(f"{prefix}/{mat[1]}b", (dim,), "zero")


def declare_encoder_layer(store, prefix, cfg):
    store.declare(f"{prefix}/ln1/gamma", (cfg.model_dim,), "one")
    store.declare(f"{prefix}/ln1/beta", (cfg.model_dim,), "zero")
    declare_attention(store, f"{prefix}/att", cfg.model_dim)
    store.declare(f"{prefix}/ln2/gamma", (cfg.model_dim,), "one")
    store.declare(f"{prefix}/ln2/beta", (cfg.model_dim,), "zero")
    store.declare(f"{prefix}/ffn/w1", (cfg.ffn_dim, cfg.model_dim), "linear")
    store.declare(f"{prefix}/ffn/b1", (cfg.ffn_dim,), "zero")
    store.declare(f"{prefix}/ffn/w2", (cfg.model_dim, cfg.ffn_dim), "linear")
    store.declare(f"{prefix}/ffn/b2", (cfg.model_dim,), "zero")


def multihead_attention(q, k, v, heads, store, prefix):
    """Scaled dot-product attention; returns (output, attention weights).

    Inputs are (L, d) or (N, L, d); weights come back as (heads, L, L) or
    (N, heads, L, L) numpy copies for heatmap capture.
    """
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = (ad.reshape(t, (1,) + t.shape) for t in (q, k, v))
    n, L, d = q.shape
    if d % heads:
        raise InvalidArgument(f"attention dim {d} not divisible by {heads} heads")
    dh = d // heads

    def split(t, name):
        t = ad.linear(t, store[f"{prefix}/{name}"], store[f"{prefix}/{name[1]}b"])
        return ad.transpose(ad.reshape(t, (n, L, heads, dh)), (0, 2, 1, 3))

    qh, kh, vh = split(q, "wq"), split(k, "wk"), split(v, "wv")
    scores = ad.mul(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = ad.softmax(scores, axis=-1)
    ctx = ad.matmul(attn, vh)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (n, L, d))
    out = ad.linear(ctx, store[f"{prefix}/wo"], store[f"{prefix}/ob"])
    weights = attn.data.copy()
    if squeeze:
        out = ad.reshape(out, (L, d))
        weights = weights[0]
    return out, weights


def encoder_layer(x, cfg, store, prefix, training=False, rng=None, norm="pre"):
    """One transformer encoder layer; returns (output, attention weights).

    Pre-norm form (default): x + MHA(LN(x)), then + FFN(LN(.)).
    Dropout is applied after the attention and feed-forward sublayers in
    train mode only.
    """

    def drop(t):
        if training and cfg.dropout > 0.0:
            if rng is None:
                raise InvalidArgument("training with dropout needs a random generator")
            return ad.dropout(t, cfg.dropout, rng)
        return t

    def ffn(t):
        h = ad.relu(ad.linear(t, store[f"{prefix}/ffn/w1"], store[f"{prefix}/ffn/b1"]))
        return ad.linear(h, store[f"{prefix}/ffn/w2"], store[f"{prefix}/ffn/b2"])

    def ln(t, which):
        return ad.layernorm(t, store[f"{prefix}/{which}/gamma"], store[f"{prefix}/{which}/beta"])

    if norm == "pre":
        xn = ln(x, "ln1")
        att, weights = multihead_attention(xn, xn, xn, cfg.heads, store, f"{prefix}/att")
        h = ad.add(x, drop(att))
        out = ad.add(h, drop(ffn(ln(h, "ln2"))))
    elif norm == "post":
        att, weights = multihead_attention(x, x, x, cfg.heads, store, f"{prefix}/att")
        h = ln(ad.add(x, drop(att)), "ln1")
        out = ln(ad.add(h, drop(ffn(h))), "ln2")
    else:
        raise InvalidArgument(f"norm must be pre or post, got {norm!r}")
    return out, weights
