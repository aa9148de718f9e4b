#!/usr/bin/env python3
"""Side-by-side timing of the numba and numpy conv/pool kernels.

The numba path is the explicit cross-correlation reference; the numpy path
is im2col + BLAS. Both accumulate in float64 and must agree within 1e-5.

Run:  python benchmarks/bench_kernels.py [--batch 4] [--width 32]
"""

import argparse
import time

import numpy as np

from mspm.kernels import numba_backend as jb
from mspm.kernels import numpy_backend as nb


def timeit(fn, min_reps=3):
    fn()  # warm up (JIT compile / page in)
    t0 = time.time()
    reps = 0
    while reps < min_reps or time.time() - t0 < 0.3:
        fn()
        reps += 1
    return (time.time() - t0) / reps


def bench_case(name, x, w, stride, pad, dil):
    y = nb.conv2d_forward(x, w, stride, pad, dil)
    y2 = jb.conv2d_forward(x, w, stride, pad, dil)
    assert np.abs(y - y2).max() < 1e-5, f"{name}: backends disagree"
    gy = np.ones_like(y)
    rows = []
    for label, f_np, f_jb in (
        ("fwd", lambda: nb.conv2d_forward(x, w, stride, pad, dil),
                lambda: jb.conv2d_forward(x, w, stride, pad, dil)),
        ("bwd_in", lambda: nb.conv2d_backward_input(gy, w, x.shape, stride, pad, dil),
                   lambda: jb.conv2d_backward_input(gy, w, x.shape, stride, pad, dil)),
        ("bwd_w", lambda: nb.conv2d_backward_weight(gy, x, w.shape, stride, pad, dil),
                  lambda: jb.conv2d_backward_weight(gy, x, w.shape, stride, pad, dil)),
    ):
        t_np, t_jb = timeit(f_np), timeit(f_jb)
        n, c, h, wd = x.shape
        co = w.shape[0]
        ho, wo = y.shape[2], y.shape[3]
        gflop = 2 * n * co * c * 9 * ho * wo / 1e9
        rows.append((f"{name}/{label}", t_np, t_jb, gflop))
    return rows


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--width", type=int, default=32)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    wth = args.width

    specs = [
        ("conv1_64x64", (args.batch, wth, 64, 64), (wth, wth, 3, 3), 1, 1, 1),
        ("conv2_s2d2", (args.batch, wth, 64, 64), (2 * wth, wth, 3, 3), 2, 1, 2),
        ("conv5_29x29", (args.batch, 4 * wth, 29, 29), (4 * wth, 4 * wth, 3, 3), 1, 1, 1),
    ]
    print(f"{'case':<22}{'numpy (ms)':>12}{'numba (ms)':>12}{'numba/numpy':>13}"
          f"{'numpy GF/s':>12}")
    print("-" * 71)
    for name, xs, ws, s, p, d in specs:
        x = rng.normal(size=xs).astype(np.float32)
        w = rng.normal(size=ws).astype(np.float32)
        for label, t_np, t_jb, gflop in bench_case(name, x, w, s, p, d):
            print(f"{label:<22}{t_np * 1e3:>12.1f}{t_jb * 1e3:>12.1f}"
                  f"{t_jb / t_np:>12.1f}x{gflop / t_np:>12.1f}")

    # pooling
    x = rng.normal(size=(args.batch, 4 * wth, 29, 29)).astype(np.float32)
    for out in (8, 1):
        a = nb.adaptive_avgpool_forward(x, out, out)
        b = jb.adaptive_avgpool_forward(x, out, out)
        assert np.abs(a - b).max() < 1e-5
        t_np = timeit(lambda: nb.adaptive_avgpool_forward(x, out, out))
        t_jb = timeit(lambda: jb.adaptive_avgpool_forward(x, out, out))
        print(f"{f'pool_29to{out}':<22}{t_np * 1e3:>12.1f}{t_jb * 1e3:>12.1f}"
              f"{t_jb / t_np:>12.1f}x{'':>12}")


if __name__ == "__main__":
    main()
