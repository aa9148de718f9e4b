"""The full descriptor model: backbone + multiscale encoder + fused head.

Each pyramid level is flattened row-major into a token sequence, gets a
separable 2D positional encoding (cell (i,j) is the concatenation of a
row-i half and a column-j half), and a shared learnable aggregation token
prepended at index 0 with a zero positional code. The same encoder stack
runs over every scale; the token outputs are concatenated together with
the flattened largest pyramid level (the residual bypass) and mapped by a
single FC layer to the final L2-normalized descriptor.
"""

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import nn
from .autodiff import Tensor
from .errors import InvalidArgument

POS_VARIANTS = ("learned-2d", "fixed-2d", "learned-1d", "fixed-1d", "none")


@dataclass
class ModelConfig:
    c_in: int = 1
    input_size: int = 64
    base_width: int = 32
    descriptor_dim: int = 128
    encoder_layers: int = 2
    heads: int = 2
    ffn_dim: int = 0              # 0 means 4 * model_dim
    dropout: float = 0.1
    pos_encoding: str = "learned-2d"
    residual: bool = True
    spp: bool = True
    transformer: str = "encoder"  # encoder | none | encoder-decoder (stub)
    cnn: str = "siamese"          # siamese | pseudo (stub)
    per_scale_token: bool = False
    norm: str = "pre"

    @property
    def model_dim(self):
        return bb.feature_dim(self.base_width)

    def resolved_ffn_dim(self):
        return self.ffn_dim if self.ffn_dim else 4 * self.model_dim

    def validate(self):
        if self.transformer == "encoder-decoder":
            raise InvalidArgument(
                "transformer=encoder-decoder is a config stub and cannot be activated")
        if self.transformer not in ("encoder", "none"):
            raise InvalidArgument(f"unknown transformer setting {self.transformer!r}")
        if self.cnn == "pseudo":
            raise InvalidArgument("cnn=pseudo (non-shared weights) is a config stub "
                                  "and cannot be activated")
        if self.cnn != "siamese":
            raise InvalidArgument(f"unknown cnn setting {self.cnn!r}")
        if self.pos_encoding not in POS_VARIANTS:
            raise InvalidArgument(f"pos_encoding must be one of {POS_VARIANTS}")
        if self.norm not in ("pre", "post"):
            raise InvalidArgument("norm must be pre or post")
        if self.model_dim % 2:
            raise InvalidArgument("feature dim must be even for split positional codes")
        if self.c_in not in (1, 3):
            raise InvalidArgument("c_in must be 1 or 3")
        for name in ("input_size", "base_width", "descriptor_dim", "encoder_layers", "heads"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be positive")
        nn.EncoderLayerConfig(self.model_dim, self.heads, self.resolved_ffn_dim(), self.dropout)
        if bb.map_size(self.input_size) < 1:
            raise InvalidArgument(f"input_size {self.input_size} collapses inside the backbone")


@dataclass
class AttentionRecord:
    """Per-scale, per-layer attention weights captured during a forward pass."""

    by_scale: dict = field(default_factory=dict)  # level -> [ (N,heads,L+1,L+1) per layer ]

    def last_layer(self, level):
        if level not in self.by_scale:
            raise InvalidArgument(f"no attention captured for the {level}x{level} scale")
        return self.by_scale[level][-1]


def sinusoid_table(n, dim):
    """Classic fixed sin/cos table of shape (n, dim)."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    ang = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.zeros((n, dim), np.float32)
    table[:, 0::2] = np.sin(ang)
    table[:, 1::2] = np.cos(ang)
    return table


class DescriptorModel:
    """Owns the config and parameter store; all forwards are methods here."""

    def __init__(self, cfg):
        cfg.validate()
        self.cfg = cfg
        self.store = nn.ParamStore()
        self.levels = bb.pyramid_levels(cfg.input_size) if cfg.spp \
            else (bb.map_size(cfg.input_size),)
        self.enc_cfg = nn.EncoderLayerConfig(cfg.model_dim, cfg.heads,
                                             cfg.resolved_ffn_dim(), cfg.dropout)
        self._declare()

    # -- parameter layout ---------------------------------------------------

    def _declare(self):
        cfg = self.cfg
        d = cfg.model_dim
        bb.declare_backbone(self.store, cfg.c_in, cfg.base_width)
        if cfg.transformer == "encoder":
            for layer in range(cfg.encoder_layers):
                nn.declare_encoder_layer(self.store, f"encoder/l{layer}", self.enc_cfg)
            if cfg.per_scale_token:
                for lv in self.levels:
                    self.store.declare(f"encoder/token/s{lv}", (d,), "embed")
            else:
                self.store.declare("encoder/token", (d,), "embed")
            if cfg.pos_encoding == "learned-2d":
                for lv in self.levels:
                    self.store.declare(f"encoder/pos/s{lv}/row", (lv, d // 2), "embed")
                    self.store.declare(f"encoder/pos/s{lv}/col", (lv, d // 2), "embed")
            elif cfg.pos_encoding == "learned-1d":
                for lv in self.levels:
                    self.store.declare(f"encoder/pos/s{lv}/table", (lv * lv, d), "embed")
        self.store.declare("head/fc/weight", (cfg.descriptor_dim, self.fc_in_dim()), "linear")
        self.store.declare("head/fc/bias", (cfg.descriptor_dim,), "zero")

    def fc_in_dim(self):
        cfg = self.cfg
        d = cfg.model_dim
        if cfg.transformer == "none":
            return sum(lv * lv for lv in self.levels) * d
        base = len(self.levels) * d
        if cfg.residual:
            base += self.levels[0] ** 2 * d
        return base

    def init(self, seed):
        nn.init_params(self.store, seed)

    def param_count(self):
        return self.store.n_params()

    # -- positional encodings ------------------------------------------------

    def positional_encoding(self, level):
        """Composed (L, d) encoding for one pyramid level, or None."""
        cfg = self.cfg
        d = cfg.model_dim
        variant = cfg.pos_encoding
        if variant == "none":
            return None
        if variant == "learned-1d":
            return self.store[f"encoder/pos/s{level}/table"]
        if variant == "fixed-1d":
            return Tensor(sinusoid_table(level * level, d))
        if variant == "learned-2d":
            row = self.store[f"encoder/pos/s{level}/row"]
            col = self.store[f"encoder/pos/s{level}/col"]
        else:  # fixed-2d
            row = Tensor(sinusoid_table(level, d // 2))
            col = Tensor(sinusoid_table(level, d // 2))
        return compose_2d_encoding(row, col)

    # -- forward pieces -------------------------------------------------------

    def token_for(self, level):
        if self.cfg.per_scale_token:
            return self.store[f"encoder/token/s{level}"]
        return self.store["encoder/token"]

    def aggregate_scales(self, pyramid, training=False, rng=None):
        """Run the shared encoder over every scale's token sequence.

        Returns ([O_k], AttentionRecord); O_k is the output at the prepended
        token position, shape (N, d).
        """
        outputs = []
        record = AttentionRecord()
        for level, fmap in zip(self.levels, pyramid):
            seq = flatten_with_token(fmap, self.positional_encoding(level),
                                     self.token_for(level))
            captured = []
            for layer in range(self.cfg.encoder_layers):
                seq, w = nn.encoder_layer(seq, self.enc_cfg, self.store,
                                          f"encoder/l{layer}", training=training,
                                          rng=rng, norm=self.cfg.norm)
                captured.append(w)
            record.by_scale[level] = captured
            outputs.append(ad.slice_tensor(seq, (slice(None), 0)))
        return outputs, record

    def fuse_and_project(self, scale_outputs, residual_map):
        """Concatenate the scale summaries (+ optional residual) and project."""
        parts = list(scale_outputs)
        if self.cfg.residual:
            if residual_map.shape[2] != self.levels[0]:
                raise InvalidArgument("residual input must be the largest pyramid level")
            parts.append(ad.flatten(residual_map, 1))
        joint = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
        desc = ad.linear(joint, self.store["head/fc/weight"], self.store["head/fc/bias"])
        return ad.l2_normalize(desc)

    def embed(self, patch, training=False, rng=None, capture_attention=False):
        """Full pipeline patch batch -> (N, descriptor_dim) unit rows.

        Returns (descriptors, AttentionRecord or None).
        """
        patch = patch if isinstance(patch, Tensor) else Tensor(patch)
        out = bb.backbone_forward(patch, self.store, self.cfg, training=training)
        if self.cfg.transformer == "none":
            flat = ad.concat([ad.flatten(p, 1) for p in out.pyramid], axis=1) \
                if len(out.pyramid) > 1 else ad.flatten(out.pyramid[0], 1)
            desc = ad.linear(flat, self.store["head/fc/weight"], self.store["head/fc/bias"])
            return ad.l2_normalize(desc), (AttentionRecord() if capture_attention else None)
        scale_outputs, record = self.aggregate_scales(out.pyramid, training, rng)
        desc = self.fuse_and_project(scale_outputs, out.pyramid[0])
        return desc, (record if capture_attention else None)

    def embed_pair(self, patch_x, patch_y, training=False, rng=None,
                   capture_attention=False):
        dx, rx = self.embed(patch_x, training, rng, capture_attention)
        dy, ry = self.embed(patch_y, training, rng, capture_attention)
        return (dx, dy), (rx, ry)


def compose_2d_encoding(row, col):
    """Cell (i, j) -> [row_table[i] ; col_table[j]], flattened row-major."""
    h, half = row.shape
    w = col.shape[0]
    rows = ad.broadcast_to(ad.reshape(row, (h, 1, half)), (h, w, half))
    cols = ad.broadcast_to(ad.reshape(col, (1, w, half)), (h, w, half))
    return ad.reshape(ad.concat([rows, cols], axis=2), (h * w, 2 * half))


def flatten_with_token(fmap, pos, token):
    """(N, C, H, W) -> (N, H*W + 1, C) with the aggregation token at index 0.

    Spatial cells flatten row-major (i outer, j inner); the positional
    encoding is added to the cell tokens only, so the prepended token
    carries a zero code.
    """
    n, c, h, w = fmap.shape
    if token.shape != (c,):
        raise InvalidArgument(f"token dim {token.shape} does not match {c} channels")
    seq = ad.reshape(ad.transpose(fmap, (0, 2, 3, 1)), (n, h * w, c))
    if pos is not None:
        if pos.shape != (h * w, c):
            raise InvalidArgument(f"positional table {pos.shape} does not match "
                                  f"a {h}x{w} map with {c} channels")
        seq = ad.add(seq, pos)
    tok = ad.broadcast_to(ad.reshape(token, (1, 1, c)), (n, 1, c))
    return ad.concat([tok, seq], axis=1)


def config_to_dict(cfg):
    """Flat str->str mapping used in checkpoint config blocks."""
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        out[f.name] = str(v)
    return out


def config_from_dict(d):
    kwargs = {}
    known = {f.name: f.type for f in fields(ModelConfig)}
    for key, val in d.items():
        if key not in known:
            raise InvalidArgument(f"unknown model config key {key!r}")
        kwargs[key] = _parse_field(key, val)
    return ModelConfig(**kwargs)


def _parse_field(key, val):
    bool_keys = {"residual", "spp", "per_scale_token"}
    float_keys = {"dropout"}
    str_keys = {"pos_encoding", "transformer", "cnn", "norm"}
    if key in bool_keys:
        low = val.strip().lower()
        if low in ("true", "1", "on", "yes"):
            return True
        if low in ("false", "0", "off", "no"):
            return False
        raise InvalidArgument(f"config key {key}: expected a boolean, got {val!r}")
    if key in float_keys:
        return float(val)
    if key in str_keys:
        return val.strip()
    return int(val)
