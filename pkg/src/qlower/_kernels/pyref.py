"""Reference conv2d kernels in plain numpy.

The forward pass carries a bit-exactness contract: partial sums are
accumulated in FP32 strictly in (c, kh, kw) order per output element,
the same order a naive six-loop convolution uses. That is why the
reduction is an explicit k-loop of fused elementwise updates instead of
a BLAS matmul (BLAS blocks and reorders the sum, changing low-order
bits). The compiled backend in ``_convk.pyx`` follows the identical
order, so both backends produce bit-identical forward results.

Backward passes have no bit-level contract (gradients are only checked
against finite differences), so they may use ``np.einsum`` for speed.
"""

import numpy as np

BACKEND_NAME = "python"


def conv_out_hw(h, w, kh, kw, stride, padding):
    """Output spatial extents of a cross-correlation."""
    sh, sw = stride
    ph, pw = padding
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    return oh, ow


def _pad(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    xp[:, :, ph:ph + h, pw:pw + w] = x
    return xp


def _im2col(xp, kh, kw, sh, sw, oh, ow):
    """(N, C, Hp, Wp) -> (N, C*kh*kw, oh*ow) with k laid out in (c, kh, kw) order."""
    n, c, _, _ = xp.shape
    cols = np.empty((n, c * kh * kw, oh * ow), dtype=xp.dtype)
    k = 0
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, ci, i:i + oh * sh:sh, j:j + ow * sw:sw]
                cols[:, k, :] = patch.reshape(n, oh * ow)
                k += 1
    return cols


def conv2d_forward(x, w, stride, padding, groups):
    """FP32 cross-correlation, NCHW x OIHW -> NCHW, ordered accumulation."""
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    oh, ow = conv_out_hw(h, wd, kh, kw, stride, padding)
    og = o // groups
    xp = _pad(x, ph, pw)
    out = np.empty((n, o, oh * ow), dtype=np.float32)
    for g in range(groups):
        cols = _im2col(xp[:, g * cg:(g + 1) * cg], kh, kw, sh, sw, oh, ow)
        wg = w[g * og:(g + 1) * og].reshape(og, cg * kh * kw)
        acc = np.zeros((n, og, oh * ow), dtype=np.float32)
        for k in range(cg * kh * kw):
            acc += wg[None, :, k, None] * cols[:, None, k, :]
        out[:, g * og:(g + 1) * og] = acc
    return out.reshape(n, o, oh, ow)


def conv2d_backward(x, w, dy, stride, padding, groups):
    """Gradients w.r.t. input and weight. Returns (dx, dw), both FP32."""
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    oh, ow = dy.shape[2], dy.shape[3]
    og = o // groups
    xp = _pad(x, ph, pw)
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    dyf = dy.reshape(n, o, oh * ow)
    for g in range(groups):
        wg = w[g * og:(g + 1) * og].reshape(og, cg * kh * kw)
        dyg = dyf[:, g * og:(g + 1) * og]
        cols = _im2col(xp[:, g * cg:(g + 1) * cg], kh, kw, sh, sw, oh, ow)
        dwg = np.einsum("nop,nkp->ok", dyg, cols, optimize=False)
        dw[g * og:(g + 1) * og] = dwg.reshape(og, cg, kh, kw).astype(np.float32)
        dcol = np.einsum("ok,nop->nkp", wg, dyg, optimize=False)
        k = 0
        for ci in range(cg):
            for i in range(kh):
                for j in range(kw):
                    dxp[:, g * cg + ci, i:i + oh * sh:sh, j:j + ow * sw:sw] += \
                        dcol[:, k].reshape(n, oh, ow)
                    k += 1
    dx = dxp[:, :, ph:ph + h, pw:pw + wd] if (ph or pw) else dxp
    return np.ascontiguousarray(dx), dw


def conv2d_int(xq, wq, stride, padding, groups, pad_value):
    """Integer cross-correlation with int64 accumulation (exact, order-free).

    ``pad_value`` is the input zero-point: padding must represent real
    value 0.0, which in the integer domain is z_x, not 0.
    """
    n, c, h, wd = xq.shape
    o, cg, kh, kw = wq.shape
    sh, sw = stride
    ph, pw = padding
    oh, ow = conv_out_hw(h, wd, kh, kw, stride, padding)
    og = o // groups
    if ph or pw:
        xp = np.full((n, c, h + 2 * ph, wd + 2 * pw), int(pad_value), dtype=np.int64)
        xp[:, :, ph:ph + h, pw:pw + wd] = xq
    else:
        xp = xq.astype(np.int64)
    out = np.empty((n, o, oh * ow), dtype=np.int64)
    for g in range(groups):
        cols = _im2col(xp[:, g * cg:(g + 1) * cg], kh, kw, sh, sw, oh, ow)
        wg = wq[g * og:(g + 1) * og].reshape(og, cg * kh * kw).astype(np.int64)
        out[:, g * og:(g + 1) * og] = np.matmul(wg[None, :, :], cols)
    return out.reshape(n, o, oh, ow)
