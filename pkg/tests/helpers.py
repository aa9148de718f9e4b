"""Shared test utilities."""

import numpy as np

from mspm import autodiff as ad
from mspm.autodiff import Tensor


class Readout:
    """Scalar probe f(out) = sum(out * R) with R fixed on first call.

    The small scale keeps |f| low enough that float32 forward noise stays
    well under the gradient-check tolerance; reusing one R across repeated
    evaluations is what makes finite differencing meaningful.
    """

    def __init__(self, seed, scale=0.1):
        self._rng = np.random.default_rng(seed)
        self._scale = scale
        self._r = None

    def __call__(self, out):
        if self._r is None:
            self._r = Tensor((self._rng.normal(size=out.shape)
                              * self._scale).astype(np.float32))
        return ad.vsum(ad.mul(out, self._r))


def rand_f32(rng, shape, scale=1.0):
    return (rng.normal(size=shape) * scale).astype(np.float32)
