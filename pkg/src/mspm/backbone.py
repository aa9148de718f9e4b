"""Siamese backbone CNN and the 4-level spatial pyramid pooling stage.

Eight 3x3 conv layers, each followed by batchnorm and relu. Channel widths
are (w, w, 2w, 2w, 4w, 4w, 4w, 4w) for a base width w (32 by default, so
the feature dim is 128). Only the third conv strides, and two layers are
dilated, so a 64x64 patch maps to a 29x29 grid.
"""

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidArgument
from .kernels import conv_out_size

# (width multiplier, stride, dilation); kernel 3 and pad 1 throughout
LAYER_SPECS = (
    (1, 1, 1),
    (1, 1, 1),
    (2, 2, 2),
    (2, 1, 1),
    (4, 1, 2),
    (4, 1, 1),
    (4, 1, 1),
    (4, 1, 1),
)

PYRAMID_LEVELS = (8, 4, 2, 1)


def feature_dim(base_width):
    return 4 * base_width


def map_size(input_size):
    """Spatial size of the final conv map for a square input."""
    s = input_size
    for _, stride, dil in LAYER_SPECS:
        s = conv_out_size(s, 3, stride, 1, dil)
    return s


def pyramid_levels(input_size):
    """SPP target sizes, clamped so every level fits the conv map."""
    m = map_size(input_size)
    levels = []
    for lv in PYRAMID_LEVELS:
        lv = min(lv, m)
        if lv not in levels:
            levels.append(lv)
    return tuple(levels)


@dataclass
class BackboneOutput:
    full_map: Tensor          # (N, 4w, m, m)
    pyramid: list             # largest level first, channels 4w


def declare_backbone(store, c_in, base_width):
    cin = c_in
    for i, (mult, _, _) in enumerate(LAYER_SPECS):
        cout = mult * base_width
        store.declare(f"backbone/conv{i}/weight", (cout, cin, 3, 3), "conv")
        store.declare(f"backbone/conv{i}/bias", (cout,), "zero")
        store.declare(f"backbone/bn{i}/gamma", (cout,), "one")
        store.declare(f"backbone/bn{i}/beta", (cout,), "zero")
        store.declare_buffer(f"backbone/bn{i}/running_mean", (cout,), 0.0)
        store.declare_buffer(f"backbone/bn{i}/running_var", (cout,), 1.0)
        cin = cout


def backbone_forward(x, store, cfg, training=False):
    """Run the conv stack and SPP over a batch of patches.

    cfg must expose c_in, input_size and base_width; the same parameter
    store serves both Siamese branches.
    """
    if x.ndim != 4:
        raise InvalidArgument("backbone expects an NCHW batch")
    n, c, h, w = x.shape
    if c != cfg.c_in:
        raise InvalidArgument(f"backbone configured for {cfg.c_in} channels, got {c}")
    if h != cfg.input_size or w != cfg.input_size:
        raise InvalidArgument(
            f"backbone configured for {cfg.input_size}x{cfg.input_size} patches, got {h}x{w}")
    for i, (_, stride, dil) in enumerate(LAYER_SPECS):
        x = ad.conv2d(x, store[f"backbone/conv{i}/weight"], store[f"backbone/conv{i}/bias"],
                      stride=stride, pad=1, dilation=dil)
        x = ad.batchnorm2d(x, store[f"backbone/bn{i}/gamma"], store[f"backbone/bn{i}/beta"],
                           store.buffer(f"backbone/bn{i}/running_mean"),
                           store.buffer(f"backbone/bn{i}/running_var"),
                           training=training)
        x = ad.relu(x)
    pyramid = [ad.adaptive_avg_pool2d(x, lv, lv) for lv in pyramid_levels(cfg.input_size)]
    return BackboneOutput(full_map=x, pyramid=pyramid)


def siamese_forward(patch_x, patch_y, store, cfg, training=False):
    """Both modalities through the identical weights."""
    return (backbone_forward(patch_x, store, cfg, training),
            backbone_forward(patch_y, store, cfg, training))
