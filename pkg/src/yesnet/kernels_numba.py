"""Numba-compiled kernels for the convolution and pooling hot loops.

Signatures mirror ``kernels_numpy``. Convolution is im2col with the
gather/scatter loops jitted and the contraction left to BLAS via ``np.dot``:
direct scalar loops lose to BLAS by 3-20x at these shapes. The RNN scans are
re-exported from the numpy module; they are BLAS-bound already.
"""

import numpy as np
from numba import njit

from .kernels_numpy import (  # noqa: F401  (re-exported, see module docstring)
    conv2d_out_shape,
    gru_backward,
    gru_forward,
    scan_backward,
    scan_forward,
)


@njit(cache=True, inline="always")
def _col_span(kj, pad, stride, w_in, w_out):
    lo = pad - kj
    lo = (lo + stride - 1) // stride if lo > 0 else 0
    hi = (w_in - 1 - kj + pad) // stride + 1
    return lo, min(hi, w_out)


@njit(cache=True)
def _gather_cols(x, bi, kh, kw, stride, pad, ho, wo, cols):
    """cols[k, ho*wo] <- padded patches of image bi (row-major over channels
    then kernel offsets)."""
    _, ci, h, w_in = x.shape
    for c in range(ci):
        for ki in range(kh):
            for kj in range(kw):
                r = (c * kh + ki) * kw + kj
                jlo, jhi = _col_span(kj, pad, stride, w_in, wo)
                for oi in range(ho):
                    ii = oi * stride + ki - pad
                    base = oi * wo
                    if ii < 0 or ii >= h:
                        for oj in range(wo):
                            cols[r, base + oj] = 0.0
                        continue
                    for oj in range(jlo):
                        cols[r, base + oj] = 0.0
                    for oj in range(jlo, jhi):
                        cols[r, base + oj] = x[bi, c, ii, oj * stride + kj - pad]
                    for oj in range(jhi, wo):
                        cols[r, base + oj] = 0.0


@njit(cache=True)
def conv2d_forward(x, w, stride, pad):
    b, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    k = ci * kh * kw
    wmat = np.ascontiguousarray(w.reshape(co, k))
    y = np.empty((b, co, ho, wo))
    cols = np.empty((k, ho * wo))
    for bi in range(b):
        _gather_cols(x, bi, kh, kw, stride, pad, ho, wo, cols)
        y[bi] = np.dot(wmat, cols).reshape(co, ho, wo)
    return y


@njit(cache=True)
def conv2d_backward(x, w, gy, stride, pad):
    b, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho, wo = gy.shape[2], gy.shape[3]
    k = ci * kh * kw
    wmat_t = np.ascontiguousarray(w.reshape(co, k).T)
    gx = np.zeros_like(x)
    gw_mat = np.zeros((co, k))
    cols = np.empty((k, ho * wo))
    for bi in range(b):
        _gather_cols(x, bi, kh, kw, stride, pad, ho, wo, cols)
        gy2 = np.ascontiguousarray(gy[bi].reshape(co, ho * wo))
        gw_mat += np.dot(gy2, np.ascontiguousarray(cols.T))
        gcols = np.dot(wmat_t, gy2)  # [k, ho*wo]
        for c in range(ci):
            for ki in range(kh):
                for kj in range(kw):
                    r = (c * kh + ki) * kw + kj
                    jlo, jhi = _col_span(kj, pad, stride, wd, wo)
                    for oi in range(ho):
                        ii = oi * stride + ki - pad
                        if ii < 0 or ii >= h:
                            continue
                        base = oi * wo
                        for oj in range(jlo, jhi):
                            gx[bi, c, ii, oj * stride + kj - pad] += gcols[r, base + oj]
    return gx, gw_mat.reshape(w.shape)


@njit(cache=True)
def maxpool2_forward(x):
    b, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    y = np.empty((b, c, ho, wo))
    idx = np.empty((b, c, ho, wo), np.int64)
    for bi in range(b):
        for ci in range(c):
            for oi in range(ho):
                for oj in range(wo):
                    best = x[bi, ci, 2 * oi, 2 * oj]
                    k = 0
                    for di in range(2):
                        for dj in range(2):
                            v = x[bi, ci, 2 * oi + di, 2 * oj + dj]
                            if v > best:
                                best = v
                                k = 2 * di + dj
                    y[bi, ci, oi, oj] = best
                    idx[bi, ci, oi, oj] = k
    return y, idx


@njit(cache=True)
def maxpool2_backward(idx, gy):
    b, c, ho, wo = gy.shape
    gx = np.zeros((b, c, 2 * ho, 2 * wo))
    for bi in range(b):
        for ci in range(c):
            for oi in range(ho):
                for oj in range(wo):
                    k = idx[bi, ci, oi, oj]
                    gx[bi, ci, 2 * oi + k // 2, 2 * oj + k % 2] = gy[bi, ci, oi, oj]
    return gx
