"""Hot numeric kernels with two interchangeable backends.

The env var MSPM_KERNELS picks the implementation:

  MSPM_KERNELS=numpy   vectorized im2col + BLAS (default)
  MSPM_KERNELS=numba   explicit @njit cross-correlation loops
  MSPM_KERNELS=auto    numpy, falling back is never needed since numpy
                       is always importable

On a single core the BLAS-backed numpy path is the faster one here
(see benchmarks/bench_kernels.py); the numba path is the readable
reference. Both agree within 1e-5 element-wise.
"""

import os

from . import numpy_backend

_choice = os.environ.get("MSPM_KERNELS", "auto").lower()

if _choice in ("auto", "numpy", ""):
    _impl = numpy_backend
elif _choice == "numba":
    from . import numba_backend as _impl
else:
    raise RuntimeError(f"MSPM_KERNELS must be auto|numpy|numba, got {_choice!r}")

BACKEND = _impl.NAME

conv_out_size = _impl.conv_out_size
conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_weight = _impl.conv2d_backward_weight
adaptive_avgpool_forward = _impl.adaptive_avgpool_forward
adaptive_avgpool_backward = _impl.adaptive_avgpool_backward

# numpy-only fast path: the forward hands its im2col matrix to the backward
conv2d_forward_with_cols = getattr(_impl, "conv2d_forward_with_cols", None)
conv2d_backward_weight_from_cols = getattr(_impl, "conv2d_backward_weight_from_cols", None)
