# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled conv2d kernels.

Forward accumulation runs in FP32 in (c, kh, kw) order per output
element — the same order as the numpy fallback and the naive six-loop
reference — so the two backends are bit-identical. Built with
-ffp-contract=off so the compiler cannot fuse the multiply-add.
"""

import numpy as np
cimport numpy as cnp

BACKEND_NAME = "cython"


def conv_out_hw(h, w, kh, kw, stride, padding):
    sh, sw = stride
    ph, pw = padding
    return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def _padded_f32(cnp.ndarray x, int ph, int pw):
    if ph == 0 and pw == 0:
        return np.ascontiguousarray(x, dtype=np.float32)
    n, c, h, w = x.shape[0], x.shape[1], x.shape[2], x.shape[3]
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=np.float32)
    xp[:, :, ph:ph + h, pw:pw + w] = x
    return xp


def conv2d_forward(x, w, stride, padding, groups):
    # Taps are the OUTER loops and output columns the inner loop, so each
    # accumulator still receives its products in (c, kh, kw) order -- the
    # bit contract -- while the inner loop is independent lanes the
    # compiler can pipeline and vectorize (unit stride when sw == 1).
    cdef int sh = stride[0], sw = stride[1]
    cdef int ph = padding[0], pw = padding[1]
    cdef int n = x.shape[0], h = x.shape[2], wd = x.shape[3]
    cdef int o = w.shape[0], cg = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef int oh = (h + 2 * ph - kh) // sh + 1
    cdef int ow = (wd + 2 * pw - kw) // sw + 1
    cdef int og = o // groups
    cdef int G = groups

    cdef const float[:, :, :, ::1] xp = _padded_f32(x, ph, pw)
    cdef const float[:, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float32)
    out = np.empty((n, o, oh, ow), dtype=np.float32)
    cdef float[:, :, :, ::1] ov = out
    cdef float[:, ::1] acc = np.empty((oh, ow), dtype=np.float32)

    cdef int ni, g, oi, yi, xi, ci, i, j, cb, oo, cc, xb
    cdef float wval
    with nogil:
        for ni in range(n):
            for g in range(G):
                cb = g * cg
                for oi in range(og):
                    oo = g * og + oi
                    for yi in range(oh):
                        for xi in range(ow):
                            acc[yi, xi] = 0.0
                    for ci in range(cg):
                        cc = cb + ci
                        for i in range(kh):
                            for j in range(kw):
                                wval = wv[oo, ci, i, j]
                                for yi in range(oh):
                                    xb = yi * sh + i
                                    if sw == 1:
                                        for xi in range(ow):
                                            acc[yi, xi] = acc[yi, xi] + \
                                                wval * xp[ni, cc, xb, xi + j]
                                    else:
                                        for xi in range(ow):
                                            acc[yi, xi] = acc[yi, xi] + \
                                                wval * xp[ni, cc, xb, xi * sw + j]
                    for yi in range(oh):
                        for xi in range(ow):
                            ov[ni, oo, yi, xi] = acc[yi, xi]
    return out


def conv2d_backward(x, w, dy, stride, padding, groups):
    cdef int sh = stride[0], sw = stride[1]
    cdef int ph = padding[0], pw = padding[1]
    cdef int n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef int o = w.shape[0], cg = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef int oh = dy.shape[2], ow = dy.shape[3]
    cdef int og = o // groups
    cdef int G = groups

    cdef const float[:, :, :, ::1] xp = _padded_f32(x, ph, pw)
    cdef const float[:, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float32)
    cdef const float[:, :, :, ::1] dyv = np.ascontiguousarray(dy, dtype=np.float32)
    dxp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw), dtype=np.float32)
    dw = np.zeros((o, cg, kh, kw), dtype=np.float32)
    cdef float[:, :, :, ::1] dxv = dxp
    cdef float[:, :, :, ::1] dwv = dw

    cdef int ni, g, oi, yi, xi, ci, i, j, cb, oo, ih, iw
    cdef float gv
    with nogil:
        for ni in range(n):
            for g in range(G):
                cb = g * cg
                for oi in range(og):
                    oo = g * og + oi
                    for yi in range(oh):
                        for xi in range(ow):
                            gv = dyv[ni, oo, yi, xi]
                            for ci in range(cg):
                                for i in range(kh):
                                    for j in range(kw):
                                        ih = yi * sh + i
                                        iw = xi * sw + j
                                        dwv[oo, ci, i, j] += gv * xp[ni, cb + ci, ih, iw]
                                        dxv[ni, cb + ci, ih, iw] += gv * wv[oo, ci, i, j]
    if ph or pw:
        dx = np.ascontiguousarray(dxp[:, :, ph:ph + h, pw:pw + wd])
    else:
        dx = dxp
    return dx, dw


def conv2d_int(xq, wq, stride, padding, groups, pad_value):
    cdef int sh = stride[0], sw = stride[1]
    cdef int ph = padding[0], pw = padding[1]
    cdef int n = xq.shape[0], c = xq.shape[1], h = xq.shape[2], wd = xq.shape[3]
    cdef int o = wq.shape[0], cg = wq.shape[1], kh = wq.shape[2], kw = wq.shape[3]
    cdef int oh = (h + 2 * ph - kh) // sh + 1
    cdef int ow = (wd + 2 * pw - kw) // sw + 1
    cdef int og = o // groups
    cdef int G = groups

    xp_arr = np.full((n, c, h + 2 * ph, wd + 2 * pw), int(pad_value), dtype=np.int64)
    xp_arr[:, :, ph:ph + h, pw:pw + wd] = xq
    cdef const long long[:, :, :, ::1] xp = xp_arr
    cdef const long long[:, :, :, ::1] wv = np.ascontiguousarray(wq, dtype=np.int64)
    out = np.empty((n, o, oh, ow), dtype=np.int64)
    cdef long long[:, :, :, ::1] ov = out
    cdef long long[:, ::1] acc = np.empty((oh, ow), dtype=np.int64)

    cdef int ni, g, oi, yi, xi, ci, i, j, cb, oo, cc, xb
    cdef long long wval
    with nogil:
        for ni in range(n):
            for g in range(G):
                cb = g * cg
                for oi in range(og):
                    oo = g * og + oi
                    for yi in range(oh):
                        for xi in range(ow):
                            acc[yi, xi] = 0
                    for ci in range(cg):
                        cc = cb + ci
                        for i in range(kh):
                            for j in range(kw):
                                wval = wv[oo, ci, i, j]
                                for yi in range(oh):
                                    xb = yi * sh + i
                                    for xi in range(ow):
                                        acc[yi, xi] = acc[yi, xi] + \
                                            wval * xp[ni, cc, xb, xi * sw + j]
                    for yi in range(oh):
                        for xi in range(ow):
                            ov[ni, oo, yi, xi] = acc[yi, xi]
    return out
