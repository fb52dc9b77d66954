"""Pure numpy implementations of the hot kernels.

Same signatures and arithmetic order as the compiled ``_ckernels`` module, so
the forward kernels agree bit for bit.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, stride, ho, wo):
    """Lower a padded NHWC batch to a ``[N*ho*wo, kh*kw*C]`` patch matrix."""
    n, _, _, c = xp.shape
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # win: [N, ho, wo, C, kh, kw] -> [N, ho, wo, kh, kw, C]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(n * ho * wo, kh * kw * c)


def col2im(cols, n, hp, wp, c, kh, kw, stride, ho, wo):
    """Adjoint of :func:`im2col`: scatter-add patch rows back into an image."""
    out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    cols6 = cols.reshape(n, ho, wo, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += cols6[:, :, :, i, j, :]
    return out


def bilinear(x, i0y, i1y, fy, i0x, i1x, fx):
    """Separable bilinear blend, rows first then columns."""
    gy = (1 - fy)[None, :, None, None]
    tmp = x[:, i0y] * gy + x[:, i1y] * fy[None, :, None, None]
    gx = (1 - fx)[None, None, :, None]
    return tmp[:, :, i0x] * gx + tmp[:, :, i1x] * fx[None, None, :, None]


def bilinear_grad(g, h, w, i0y, i1y, fy, i0x, i1x, fx):
    """Adjoint of :func:`bilinear` with respect to its input image."""
    n, ho, _, c = g.shape
    dtmp = np.zeros((n, ho, w, c), dtype=g.dtype)
    np.add.at(dtmp, (slice(None), slice(None), i0x), g * (1 - fx)[None, None, :, None])
    np.add.at(dtmp, (slice(None), slice(None), i1x), g * fx[None, None, :, None])
    dx = np.zeros((n, h, w, c), dtype=g.dtype)
    np.add.at(dx, (slice(None), i0y), dtmp * (1 - fy)[None, :, None, None])
    np.add.at(dx, (slice(None), i1y), dtmp * fy[None, :, None, None])
    return dx
