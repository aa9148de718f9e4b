"""Vectorized numpy kernels (im2col + BLAS gemm, float64 accumulation).

This is the optimized counterpart of the explicit-loop numba backend.
Both backends must agree within 1e-5; the test suite enforces it.
"""

import numpy as np

NAME = "numpy"


def conv_out_size(size, k, stride, pad, dilation):
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _pad_input(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(x, kh, kw, stride, pad, dilation, ho, wo):
    """Return patches as a (N*HO*WO, C*KH*KW) float64 matrix (one gather pass)."""
    xp = _pad_input(x, pad)
    khe = dilation * (kh - 1) + 1
    kwe = dilation * (kw - 1) + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (khe, kwe), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, ::dilation, ::dilation]
    win = win[:, :, :ho, :wo]
    n, c = x.shape[:2]
    cols = np.empty((n, ho, wo, c, kh, kw), np.float64)
    cols[...] = win.transpose(0, 2, 3, 1, 4, 5)    # cast while gathering
    return cols.reshape(n * ho * wo, c * kh * kw)


def conv2d_forward_with_cols(x, w, stride, pad, dilation):
    """Forward pass returning the im2col matrix for reuse in the backward."""
    n, c, h, wth = x.shape
    co, _, kh, kw = w.shape
    ho = conv_out_size(h, kh, stride, pad, dilation)
    wo = conv_out_size(wth, kw, stride, pad, dilation)
    cols = _im2col(x, kh, kw, stride, pad, dilation, ho, wo)
    y = cols @ w.reshape(co, -1).T.astype(np.float64)
    y = y.reshape(n, ho, wo, co).transpose(0, 3, 1, 2).astype(np.float32)
    return np.ascontiguousarray(y), cols


def conv2d_forward(x, w, stride, pad, dilation):
    return conv2d_forward_with_cols(x, w, stride, pad, dilation)[0]


def conv2d_backward_input(gy, w, x_shape, stride, pad, dilation):
    """Input gradient as a stride-1 convolution of the (dilated) output grad
    with the flipped, in/out-swapped kernel; falls back to an explicit
    scatter when the transposed padding would go negative."""
    n, c, h, wth = x_shape
    co, _, kh, kw = w.shape
    ho, wo = gy.shape[2], gy.shape[3]
    pad_t = dilation * (kh - 1) - pad
    pad_tw = dilation * (kw - 1) - pad
    if pad_t < 0 or pad_tw < 0 or pad_t != pad_tw:
        return _backward_input_scatter(gy, w, x_shape, stride, pad, dilation)
    rh = h + 2 * pad - dilation * (kh - 1) - 1 - (ho - 1) * stride
    rw = wth + 2 * pad - dilation * (kw - 1) - 1 - (wo - 1) * stride
    gyd = np.zeros((n, co, (ho - 1) * stride + 1 + rh, (wo - 1) * stride + 1 + rw),
                   np.float32)
    gyd[:, :, ::stride, ::stride][:, :, :ho, :wo] = gy
    w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return conv2d_forward(gyd, w_flip, 1, pad_t, dilation)


def _backward_input_scatter(gy, w, x_shape, stride, pad, dilation):
    n, c, h, wth = x_shape
    co, _, kh, kw = w.shape
    ho, wo = gy.shape[2], gy.shape[3]
    g2 = np.empty((n * ho * wo, co), np.float64)
    g2[...] = gy.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
    gcols = g2 @ w.reshape(co, -1).astype(np.float64)
    gcols = gcols.reshape(n, ho, wo, c, kh, kw)
    gxp = np.zeros((n, c, h + 2 * pad, wth + 2 * pad), np.float64)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i * dilation:i * dilation + ho * stride:stride,
                j * dilation:j * dilation + wo * stride:stride] += \
                gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        gxp = gxp[:, :, pad:-pad, pad:-pad]
    return gxp.astype(np.float32)


def conv2d_backward_weight_from_cols(gy, cols, w_shape):
    co, c, kh, kw = w_shape
    n, _, ho, wo = gy.shape
    g2 = np.empty((n * ho * wo, co), np.float64)
    g2[...] = gy.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
    gw = g2.T @ cols
    return gw.reshape(co, c, kh, kw).astype(np.float32)


def conv2d_backward_weight(gy, x, w_shape, stride, pad, dilation):
    co, c, kh, kw = w_shape
    ho, wo = gy.shape[2], gy.shape[3]
    cols = _im2col(x, kh, kw, stride, pad, dilation, ho, wo)
    return conv2d_backward_weight_from_cols(gy, cols, w_shape)


def _bin_edges(size, out):
    starts = (np.arange(out) * size) // out
    ends = -((-(np.arange(out) + 1) * size) // out)  # ceil
    return starts, ends


def adaptive_avgpool_forward(x, out_h, out_w):
    n, c, h, w = x.shape
    hs, he = _bin_edges(h, out_h)
    ws, we = _bin_edges(w, out_w)
    y = np.empty((n, c, out_h, out_w), np.float32)
    for i in range(out_h):
        for j in range(out_w):
            bin_ = x[:, :, hs[i]:he[i], ws[j]:we[j]]
            y[:, :, i, j] = bin_.mean(axis=(2, 3), dtype=np.float64)
    return y


def adaptive_avgpool_backward(gy, h, w):
    n, c, out_h, out_w = gy.shape
    hs, he = _bin_edges(h, out_h)
    ws, we = _bin_edges(w, out_w)
    gx = np.zeros((n, c, h, w), np.float64)
    for i in range(out_h):
        for j in range(out_w):
            cnt = (he[i] - hs[i]) * (we[j] - ws[j])
            gx[:, :, hs[i]:he[i], ws[j]:we[j]] += \
                gy[:, :, i, j, None, None].astype(np.float64) / cnt
    return gx.astype(np.float32)
