# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled conv2d kernels: C-loop im2col fused with direct BLAS GEMM.

Same contract as ``mcdiff.nn.kernels_np``; float32/float64 via fused types.
Accumulation order is fixed, so results are bitwise reproducible run-to-run.
"""

import numpy as np

cimport numpy as cnp
from cython cimport floating
from libc.string cimport memset
from scipy.linalg.cython_blas cimport dgemm, sgemm

cnp.import_array()


cdef void _gemm(char ta, char tb, int m, int n, int k,
                floating* a, int lda, floating* b, int ldb,
                floating beta, floating* c, int ldc) noexcept nogil:
    # Fortran semantics: C(m,n) = op(A)(m,k) @ op(B)(k,n) + beta*C
    cdef floating alpha = 1
    if floating is float:
        sgemm(&ta, &tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)
    else:
        dgemm(&ta, &tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)


cdef void _im2col(floating* x, floating* cols, int ci, int h, int w,
                  int kk, int stride, int pad, int ho, int wo) noexcept nogil:
    cdef int c, i, j, oh, ow, ih, iw, row, oh_lo, oh_hi, ow_lo, ow_hi
    cdef floating* src
    cdef floating* dst
    memset(cols, 0, <size_t>(ci * kk * kk) * <size_t>(ho * wo) * sizeof(floating))
    for c in range(ci):
        for i in range(kk):
            # valid output rows satisfy 0 <= oh*stride + i - pad < h
            oh_lo = 0 if i >= pad else (pad - i + stride - 1) // stride
            oh_hi = (h - 1 - i + pad) // stride + 1
            if oh_hi > ho:
                oh_hi = ho
            for j in range(kk):
                ow_lo = 0 if j >= pad else (pad - j + stride - 1) // stride
                ow_hi = (w - 1 - j + pad) // stride + 1
                if ow_hi > wo:
                    ow_hi = wo
                row = (c * kk + i) * kk + j
                for oh in range(oh_lo, oh_hi):
                    ih = oh * stride + i - pad
                    src = x + (c * h + ih) * w
                    dst = cols + (<size_t>row * ho + oh) * wo
                    for ow in range(ow_lo, ow_hi):
                        iw = ow * stride + j - pad
                        dst[ow] = src[iw]


def conv2d_fwd(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
               bias, int stride, int pad):
    cdef int bs = x.shape[0], ci = x.shape[1], h = x.shape[2], wi = x.shape[3]
    cdef int co = w.shape[0], kk = w.shape[2]
    cdef int ho = (h + 2 * pad - kk) // stride + 1
    cdef int wo = (wi + 2 * pad - kk) // stride + 1
    cdef int kdim = ci * kk * kk, n = ho * wo
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty((bs, co, ho, wo), dtype=dtype)
    cols_arr = np.empty((kdim, n), dtype=dtype)
    cdef floating[:, :, :, ::1] y = y_arr
    cdef floating[:, ::1] cols = cols_arr
    cdef floating[::1] bv
    cdef bint has_bias = bias is not None
    if has_bias:
        bv = bias
    cdef int b, c, p
    cdef floating bc
    cdef floating* yp
    with nogil:
        for b in range(bs):
            _im2col(&x[b, 0, 0, 0], &cols[0, 0], ci, h, wi, kk, stride, pad, ho, wo)
            # y_b row-major (co,n): Fortran y^T(n,co) = cols^T(n,kdim) @ w^T(kdim,co)
            _gemm(c'N', c'N', n, co, kdim,
                  &cols[0, 0], n, &w[0, 0, 0, 0], kdim, 0.0, &y[b, 0, 0, 0], n)
        if has_bias:
            for b in range(bs):
                for c in range(co):
                    bc = bv[c]
                    yp = &y[b, c, 0, 0]
                    for p in range(n):
                        yp[p] += bc
    return y_arr


def conv2d_bwd_input(floating[:, :, :, ::1] dy, floating[:, :, :, ::1] w,
                     int stride, int pad, int h, int wi):
    cdef int bs = dy.shape[0], co = dy.shape[1], ho = dy.shape[2], wo = dy.shape[3]
    cdef int ci = w.shape[1], kk = w.shape[2]
    cdef int kdim = ci * kk * kk, n = ho * wo
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.zeros((bs, ci, h, wi), dtype=dtype)
    dcols_arr = np.empty((kdim, n), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = dx_arr
    cdef floating[:, ::1] dcols = dcols_arr
    cdef int b, c, i, j, oh, ow, ih, iw, row, oh_lo, oh_hi, ow_lo, ow_hi
    cdef floating* src
    cdef floating* dst
    with nogil:
        for b in range(bs):
            # dcols row-major (kdim,n): Fortran dcols^T(n,kdim) = dy^T(n,co) @ w(co,kdim)
            _gemm(c'N', c'T', n, kdim, co,
                  &dy[b, 0, 0, 0], n, &w[0, 0, 0, 0], kdim, 0.0, &dcols[0, 0], n)
            for c in range(ci):
                for i in range(kk):
                    oh_lo = 0 if i >= pad else (pad - i + stride - 1) // stride
                    oh_hi = (h - 1 - i + pad) // stride + 1
                    if oh_hi > ho:
                        oh_hi = ho
                    for j in range(kk):
                        ow_lo = 0 if j >= pad else (pad - j + stride - 1) // stride
                        ow_hi = (wi - 1 - j + pad) // stride + 1
                        if ow_hi > wo:
                            ow_hi = wo
                        row = (c * kk + i) * kk + j
                        for oh in range(oh_lo, oh_hi):
                            ih = oh * stride + i - pad
                            dst = &dx[b, c, ih, 0]
                            src = &dcols[row, oh * wo]
                            for ow in range(ow_lo, ow_hi):
                                iw = ow * stride + j - pad
                                dst[iw] += src[ow]
    return dx_arr


def conv2d_bwd_params(floating[:, :, :, ::1] x, floating[:, :, :, ::1] dy,
                      int stride, int pad, int kk):
    cdef int bs = x.shape[0], ci = x.shape[1], h = x.shape[2], wi = x.shape[3]
    cdef int co = dy.shape[1], ho = dy.shape[2], wo = dy.shape[3]
    cdef int kdim = ci * kk * kk, n = ho * wo
    dtype = np.float32 if floating is float else np.float64
    dw_arr = np.zeros((co, ci, kk, kk), dtype=dtype)
    db_arr = np.zeros(co, dtype=dtype)
    cols_arr = np.empty((kdim, n), dtype=dtype)
    cdef floating[:, :, :, ::1] dw = dw_arr
    cdef floating[::1] db = db_arr
    cdef floating[:, ::1] cols = cols_arr
    cdef int b, c, p
    cdef floating acc
    cdef floating* dyp
    with nogil:
        for b in range(bs):
            _im2col(&x[b, 0, 0, 0], &cols[0, 0], ci, h, wi, kk, stride, pad, ho, wo)
            # dw row-major (co,kdim): Fortran dw^T(kdim,co) += cols(kdim,n) @ dy^T(n,co)
            _gemm(c'T', c'N', kdim, co, n,
                  &cols[0, 0], n, &dy[b, 0, 0, 0], n, 1.0, &dw[0, 0, 0, 0], kdim)
        for c in range(co):
            acc = 0
            for b in range(bs):
                dyp = &dy[b, c, 0, 0]
                for p in range(n):
                    acc += dyp[p]
            db[c] = acc
    return dw_arr, db_arr
