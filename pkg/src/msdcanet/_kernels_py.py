"""Pure-NumPy implementations of the hot data-movement kernels.

These are drop-in twins of the compiled versions in ``_kernels_cy``; the
active backend is picked in :mod:`msdcanet.kernels`. The two backends must
stay bit-identical, so every kernel accumulates contributions to a given
destination element in the same tap order (kernel row, then kernel column).
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def conv_out_extent(size, k, stride, dilation, pad):
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def im2col(x, kh, kw, sh, sw, dh, dw, ph, pw):
    """Unfold (N,C,H,W) into (N, C*kh*kw, Ho*Wo) patch columns, zero-padded."""
    n, c, h, w = x.shape
    ho = conv_out_extent(h, kh, sh, dh, ph)
    wo = conv_out_extent(w, kw, sw, dw, pw)
    if ph or pw:
        xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
        xp[:, :, ph:ph + h, pw:pw + w] = x
    else:
        xp = x
    s0, s1, s2, s3 = xp.strides
    windows = as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s0, s1, s2 * dh, s3 * dw, s2 * sh, s3 * sw),
    )
    return windows.reshape(n, c * kh * kw, ho * wo)


def col2im(cols, h, w, kh, kw, sh, sw, dh, dw, ph, pw, ho, wo):
    """Adjoint of im2col: scatter-add patch columns back onto (N,C,H,W)."""
    n = cols.shape[0]
    c = cols.shape[1] // (kh * kw)
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i * dh:i * dh + sh * ho:sh, j * dw:j * dw + sw * wo:sw] += cols6[:, :, i, j]
    if ph or pw:
        return np.ascontiguousarray(xp[:, :, ph:ph + h, pw:pw + w])
    return xp


def maxpool2_forward(x):
    """2x2 stride-2 max pooling; returns (pooled, argmax in {0..3}).

    The argmax index enumerates the window in row-major order and NumPy's
    argmax keeps the first occurrence, which fixes tie-breaking.
    """
    n, c, h, w = x.shape
    windows = (
        x.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    idx = windows.argmax(axis=4).astype(np.uint8)
    y = np.take_along_axis(windows, idx[..., None].astype(np.intp), axis=4)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool2_backward(gy, idx):
    """Route pooled gradients back to the argmax cell of each window."""
    n, c, ho, wo = gy.shape
    g4 = np.zeros((n, c, ho, wo, 4), dtype=gy.dtype)
    np.put_along_axis(g4, idx[..., None].astype(np.intp), gy[..., None], axis=4)
    return np.ascontiguousarray(
        g4.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    )
