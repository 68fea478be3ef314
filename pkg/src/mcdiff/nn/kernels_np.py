"""Pure-numpy conv2d kernels (im2col + BLAS matmul).

Fallback implementation used when the compiled extension is unavailable.
Signatures match ``mcdiff.nn._ckernels`` exactly. All arrays are NCHW,
float32 or float64, C-contiguous.
"""

import numpy as np


def _out_size(h: int, k: int, stride: int, pad: int) -> int:
    return (h + 2 * pad - k) // stride + 1


def _im2col(xp, k, stride, ho, wo):
    # xp: padded input (B, C, Hp, Wp) -> cols (B, C, k, k, ho, wo)
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        hi = i + stride * ho
        for j in range(k):
            wj = j + stride * wo
            cols[:, :, i, j] = xp[:, :, i:hi:stride, j:wj:stride]
    return cols


def conv2d_fwd(x, w, b, stride, pad):
    """y[B,Co,Ho,Wo] = w[Co,Ci,k,k] * x[B,Ci,H,W] + b[Co]."""
    bs, ci, h, wi = x.shape
    co, _, k, _ = w.shape
    ho, wo = _out_size(h, k, stride, pad), _out_size(wi, k, stride, pad)
    if pad:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x
    cols = _im2col(xp, k, stride, ho, wo).reshape(bs, ci * k * k, ho * wo)
    y = np.matmul(w.reshape(co, -1), cols)  # (B, Co, ho*wo)
    if b is not None:
        y += b[:, None]
    return np.ascontiguousarray(y.reshape(bs, co, ho, wo))


def conv2d_bwd_input(dy, w, stride, pad, h, wi):
    """Gradient w.r.t. the conv input, shape (B, Ci, h, wi)."""
    bs, co, ho, wo = dy.shape
    _, ci, k, _ = w.shape
    dcols = np.matmul(w.reshape(co, -1).T, dy.reshape(bs, co, ho * wo))
    dcols = dcols.reshape(bs, ci, k, k, ho, wo)
    dxp = np.zeros((bs, ci, h + 2 * pad, wi + 2 * pad), dtype=dy.dtype)
    for i in range(k):
        hi = i + stride * ho
        for j in range(k):
            wj = j + stride * wo
            dxp[:, :, i:hi:stride, j:wj:stride] += dcols[:, :, i, j]
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad:-pad, pad:-pad])
    return dxp


def conv2d_bwd_params(x, dy, stride, pad, k):
    """Gradients w.r.t. conv weights (Co,Ci,k,k) and bias (Co,)."""
    bs, ci, h, wi = x.shape
    co = dy.shape[1]
    ho, wo = dy.shape[2], dy.shape[3]
    if pad:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x
    cols = _im2col(xp, k, stride, ho, wo).reshape(bs, ci * k * k, ho * wo)
    dy2 = dy.reshape(bs, co, ho * wo)
    dw = np.einsum("bon,bkn->ok", dy2, cols, optimize=True)
    db = dy2.sum(axis=(0, 2))
    return np.ascontiguousarray(dw.reshape(co, ci, k, k)), db
