"""Explicit-loop kernels compiled with numba @njit.

conv2d is written as plain cross-correlation loops with float64
accumulators; this is the reference implementation the vectorized numpy
backend is checked against. First call per process pays JIT compilation
(cached on disk afterwards).
"""

import numpy as np
from numba import njit

NAME = "numba"


def conv_out_size(size, k, stride, pad, dilation):
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


@njit(cache=True)
def conv2d_forward(x, w, stride, pad, dilation):
    n, c, h, wth = x.shape
    co, _, kh, kw = w.shape
    ho = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    wo = (wth + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    y = np.empty((n, co, ho, wo), np.float32)
    for b in range(n):
        for o in range(co):
            for oh in range(ho):
                for ow in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for i in range(kh):
                            ih = oh * stride - pad + i * dilation
                            if ih < 0 or ih >= h:
                                continue
                            for j in range(kw):
                                iw = ow * stride - pad + j * dilation
                                if 0 <= iw < wth:
                                    acc += np.float64(w[o, ci, i, j]) * np.float64(x[b, ci, ih, iw])
                    y[b, o, oh, ow] = acc
    return y


@njit(cache=True)
def conv2d_backward_input(gy, w, x_shape, stride, pad, dilation):
    n, c, h, wth = x_shape
    co, _, kh, kw = w.shape
    ho, wo = gy.shape[2], gy.shape[3]
    gx = np.zeros((n, c, h, wth), np.float64)
    for b in range(n):
        for o in range(co):
            for oh in range(ho):
                for ow in range(wo):
                    g = np.float64(gy[b, o, oh, ow])
                    for ci in range(c):
                        for i in range(kh):
                            ih = oh * stride - pad + i * dilation
                            if ih < 0 or ih >= h:
                                continue
                            for j in range(kw):
                                iw = ow * stride - pad + j * dilation
                                if 0 <= iw < wth:
                                    gx[b, ci, ih, iw] += g * np.float64(w[o, ci, i, j])
    return gx.astype(np.float32)


@njit(cache=True)
def conv2d_backward_weight(gy, x, w_shape, stride, pad, dilation):
    co, c, kh, kw = w_shape
    n, _, h, wth = x.shape
    ho, wo = gy.shape[2], gy.shape[3]
    gw = np.zeros((co, c, kh, kw), np.float64)
    for b in range(n):
        for o in range(co):
            for oh in range(ho):
                for ow in range(wo):
                    g = np.float64(gy[b, o, oh, ow])
                    for ci in range(c):
                        for i in range(kh):
                            ih = oh * stride - pad + i * dilation
                            if ih < 0 or ih >= h:
                                continue
                            for j in range(kw):
                                iw = ow * stride - pad + j * dilation
                                if 0 <= iw < wth:
                                    gw[o, ci, i, j] += g * np.float64(x[b, ci, ih, iw])
    return gw.astype(np.float32)


@njit(cache=True)
def _bin_start(i, size, out):
    return (i * size) // out


@njit(cache=True)
def _bin_end(i, size, out):
    return -((-(i + 1) * size) // out)


@njit(cache=True)
def adaptive_avgpool_forward(x, out_h, out_w):
    n, c, h, w = x.shape
    y = np.empty((n, c, out_h, out_w), np.float32)
    for b in range(n):
        for ci in range(c):
            for i in range(out_h):
                h0, h1 = _bin_start(i, h, out_h), _bin_end(i, h, out_h)
                for j in range(out_w):
                    w0, w1 = _bin_start(j, w, out_w), _bin_end(j, w, out_w)
                    acc = 0.0
                    for ih in range(h0, h1):
                        for iw in range(w0, w1):
                            acc += np.float64(x[b, ci, ih, iw])
                    y[b, ci, i, j] = acc / ((h1 - h0) * (w1 - w0))
    return y


@njit(cache=True)
def adaptive_avgpool_backward(gy, h, w):
    n, c, out_h, out_w = gy.shape
    gx = np.zeros((n, c, h, w), np.float64)
    for b in range(n):
        for ci in range(c):
            for i in range(out_h):
                h0, h1 = _bin_start(i, h, out_h), _bin_end(i, h, out_h)
                for j in range(out_w):
                    w0, w1 = _bin_start(j, w, out_w), _bin_end(j, w, out_w)
                    g = np.float64(gy[b, ci, i, j]) / ((h1 - h0) * (w1 - w0))
                    for ih in range(h0, h1):
                        for iw in range(w0, w1):
                            gx[b, ci, ih, iw] += g
    return gx.astype(np.float32)
