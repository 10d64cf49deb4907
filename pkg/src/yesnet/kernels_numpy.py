"""Pure-numpy kernels: im2col convolution, 2x2 max pooling, RNN scans.

These are the fallback implementations behind ``yesnet.backend``; the numba
module mirrors every signature. All arrays are float64 and C-contiguous.
The convolution is im2col + BLAS, the pooling and scans are thin loops over
vectorized numpy, so everything stays bit-deterministic run to run.
"""

import numpy as np


def conv2d_out_shape(h, w, kh, kw, stride, pad):
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


def _im2col(x, kh, kw, stride, pad):
    b, c, h, w = x.shape
    ho, wo = conv2d_out_shape(h, w, kh, kw, stride, pad)
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [b, c, ho, wo, kh, kw]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def conv2d_forward(x, w, stride, pad):
    b = x.shape[0]
    co, _, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    y = np.matmul(w.reshape(co, -1)[None], cols)
    return y.reshape(b, co, ho, wo)


def conv2d_backward(x, w, gy, stride, pad):
    b, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho, wo = gy.shape[2], gy.shape[3]
    cols, _, _ = _im2col(x, kh, kw, stride, pad)
    gy2 = gy.reshape(b, co, ho * wo)
    gw = np.matmul(gy2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    gcols = np.matmul(w.reshape(co, -1).T[None], gy2)
    gcols = gcols.reshape(b, ci, kh, kw, ho, wo)
    hp, wp = h + 2 * pad, wd + 2 * pad
    gxp = np.zeros((b, ci, hp, wp))
    for ki in range(kh):
        for kj in range(kw):
            gxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += gcols[:, :, ki, kj]
    return gxp[:, :, pad:pad + h, pad:pad + wd], gw


def maxpool2_forward(x):
    b, c, h, w = x.shape
    win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(b, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)  # first max wins: deterministic tie-break
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, idx.astype(np.int64)


def maxpool2_backward(idx, gy):
    b, c, ho, wo = gy.shape
    gwin = np.zeros((b, c, ho, wo, 4))
    np.put_along_axis(gwin, idx[..., None], gy[..., None], axis=-1)
    gx = gwin.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(gx.reshape(b, c, 2 * ho, 2 * wo))


# ---------------------------------------------------------------------------
# Recurrent scans. x is [T, B, I]; weights follow cell layout:
#   tanh/linear: w_in [H, I], w_h [H, H], b [H]
#   gru:         w_in [3H, I], w_h [3H, H], b [3H], gate order (r, z, n)
# ``act`` codes: 0 = linear, 1 = tanh.
# ---------------------------------------------------------------------------

def _steps(t, reverse):
    return range(t - 1, -1, -1) if reverse else range(t)


def scan_forward(x, w_in, w_h, b, reverse, act):
    t, bb, _ = x.shape
    hdim = w_h.shape[0]
    pre_in = x @ w_in.T + b
    hs = np.zeros((t, bb, hdim))
    h = np.zeros((bb, hdim))
    for step in _steps(t, reverse):
        pre = pre_in[step] + h @ w_h.T
        h = np.tanh(pre) if act == 1 else pre
        hs[step] = h
    return hs


def scan_backward(x, w_in, w_h, hs, gy, reverse, act):
    t, bb, _ = x.shape
    hdim = w_h.shape[0]
    gx = np.zeros_like(x)
    gwin = np.zeros_like(w_in)
    gwh = np.zeros_like(w_h)
    gb = np.zeros(hdim)
    gh_next = np.zeros((bb, hdim))
    order = list(_steps(t, reverse))
    for k in range(t - 1, -1, -1):
        step = order[k]
        gh = gy[step] + gh_next
        gpre = gh * (1.0 - hs[step] ** 2) if act == 1 else gh
        h_prev = hs[order[k - 1]] if k > 0 else np.zeros((bb, hdim))
        gwin += gpre.T @ x[step]
        gwh += gpre.T @ h_prev
        gb += gpre.sum(axis=0)
        gx[step] = gpre @ w_in
        gh_next = gpre @ w_h
    return gx, gwin, gwh, gb


def gru_forward(x, w_in, w_h, b, reverse):
    t, bb, _ = x.shape
    hdim = w_h.shape[1]
    pre_in = x @ w_in.T + b
    hs = np.zeros((t, bb, hdim))
    rs = np.zeros((t, bb, hdim))
    zs = np.zeros((t, bb, hdim))
    ns = np.zeros((t, bb, hdim))
    hns = np.zeros((t, bb, hdim))  # the recurrent pre-activation gated by r
    h = np.zeros((bb, hdim))
    for step in _steps(t, reverse):
        pre_h = h @ w_h.T
        r = 1.0 / (1.0 + np.exp(-(pre_in[step, :, :hdim] + pre_h[:, :hdim])))
        z = 1.0 / (1.0 + np.exp(-(pre_in[step, :, hdim:2 * hdim] + pre_h[:, hdim:2 * hdim])))
        hn = pre_h[:, 2 * hdim:]
        n = np.tanh(pre_in[step, :, 2 * hdim:] + r * hn)
        h = (1.0 - z) * n + z * h
        rs[step], zs[step], ns[step], hns[step], hs[step] = r, z, n, hn, h
    return hs, rs, zs, ns, hns


def gru_backward(x, w_in, w_h, hs, rs, zs, ns, hns, gy, reverse):
    t, bb, _ = x.shape
    hdim = w_h.shape[1]
    gx = np.zeros_like(x)
    gwin = np.zeros_like(w_in)
    gwh = np.zeros_like(w_h)
    gb = np.zeros(3 * hdim)
    gh_next = np.zeros((bb, hdim))
    order = list(_steps(t, reverse))
    for k in range(t - 1, -1, -1):
        step = order[k]
        h_prev = hs[order[k - 1]] if k > 0 else np.zeros((bb, hdim))
        r, z, n, hn = rs[step], zs[step], ns[step], hns[step]
        gh = gy[step] + gh_next
        dn = gh * (1.0 - z)
        dz = gh * (h_prev - n)
        da_n = dn * (1.0 - n ** 2)
        dr = da_n * hn
        dhn = da_n * r
        da_z = dz * z * (1.0 - z)
        da_r = dr * r * (1.0 - r)
        da = np.concatenate([da_r, da_z, da_n], axis=1)
        dpre_h = np.concatenate([da_r, da_z, dhn], axis=1)
        gwin += da.T @ x[step]
        gwh += dpre_h.T @ h_prev
        gb += da.sum(axis=0)
        gx[step] = da @ w_in
        gh_next = dpre_h @ w_h + gh * z
    return gx, gwin, gwh, gb
