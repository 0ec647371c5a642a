"""Pure numpy sliding-window kernels (fallback for the compiled extension).

All functions take already-padded NHWC arrays. Window tap (i, j) of output
position (y, x) reads input row ``y*stride + i*dilation`` and column
``x*stride + j*dilation``.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _windows(xp, kh, kw, stride, dilation, ho, wo):
    n, _, _, c = xp.shape
    sn, sh, sw, sc = xp.strides
    return as_strided(
        xp,
        shape=(n, ho, wo, kh, kw, c),
        strides=(sn, sh * stride, sw * stride, sh * dilation, sw * dilation, sc),
        writeable=False,
    )


def im2col(xp, kh, kw, stride, dilation, ho, wo):
    """Gather windows into an (N, ho, wo, kh, kw, C) contiguous array."""
    return np.ascontiguousarray(_windows(xp, kh, kw, stride, dilation, ho, wo))


def col2im(cols, hp, wp, stride, dilation):
    """Scatter-add (N, ho, wo, kh, kw, C) windows back onto an (N, hp, wp, C) map."""
    n, ho, wo, kh, kw, c = cols.shape
    out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            out[:, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride, :] += cols[:, :, :, i, j, :]
    return out


def maxpool_forward(xp, k, stride, ho, wo):
    """Max over k x k windows; returns values and the first argmax tap index."""
    win = _windows(xp, k, k, stride, 1, ho, wo)
    n, _, _, _, _, c = win.shape
    flat = win.reshape(n, ho, wo, k * k, c)
    idx = flat.argmax(axis=3)
    out = np.take_along_axis(flat, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return out, idx.astype(np.int32)


def maxpool_backward(g, argmax, hp, wp, k, stride):
    n, ho, wo, c = g.shape
    cols = np.zeros((n, ho, wo, k * k, c), dtype=g.dtype)
    np.put_along_axis(cols, argmax[:, :, :, None, :].astype(np.intp), g[:, :, :, None, :], axis=3)
    return col2im(cols.reshape(n, ho, wo, k, k, c), hp, wp, stride, 1)
