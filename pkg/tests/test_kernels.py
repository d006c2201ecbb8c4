"""Backend parity: the compiled kernels and the NumPy fallback must agree
bit for bit, and col2im must be the exact adjoint of im2col."""

import numpy as np
import pytest

from msdcanet import _kernels_py

try:
    from msdcanet import _kernels_cy
except ImportError:
    _kernels_cy = None

needs_ext = pytest.mark.skipif(_kernels_cy is None, reason="compiled extension not built")

CASES = [
    # (n, c, h, w, kh, kw, sh, sw, dh, dw, ph, pw)
    (1, 1, 5, 5, 3, 3, 1, 1, 1, 1, 1, 1),
    (2, 3, 8, 6, 3, 3, 2, 2, 1, 1, 1, 1),
    (1, 4, 7, 7, 3, 3, 1, 1, 2, 2, 2, 2),
    (2, 2, 6, 6, 1, 1, 1, 1, 1, 1, 0, 0),
    (1, 2, 9, 5, 5, 3, 2, 1, 1, 2, 2, 3),
    (1, 8, 4, 4, 3, 3, 1, 1, 8, 8, 8, 8),   # dilation far beyond the map
]


def _rand(shape, dtype, seed):
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype)


@needs_ext
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("case", CASES)
def test_im2col_backends_bit_identical(case, dtype):
    n, c, h, w, kh, kw, sh, sw, dh, dw, ph, pw = case
    x = _rand((n, c, h, w), dtype, seed=hash(case) % 2**31)
    a = _kernels_py.im2col(x, kh, kw, sh, sw, dh, dw, ph, pw)
    b = _kernels_cy.im2col(x, kh, kw, sh, sw, dh, dw, ph, pw)
    assert a.dtype == b.dtype == dtype
    assert np.array_equal(a, b)


@needs_ext
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("case", CASES)
def test_col2im_backends_bit_identical(case, dtype):
    n, c, h, w, kh, kw, sh, sw, dh, dw, ph, pw = case
    ho = _kernels_py.conv_out_extent(h, kh, sh, dh, ph)
    wo = _kernels_py.conv_out_extent(w, kw, sw, dw, pw)
    cols = _rand((n, c * kh * kw, ho * wo), dtype, seed=hash(case) % 2**31 + 1)
    a = _kernels_py.col2im(cols, h, w, kh, kw, sh, sw, dh, dw, ph, pw, ho, wo)
    b = _kernels_cy.col2im(cols, h, w, kh, kw, sh, sw, dh, dw, ph, pw, ho, wo)
    assert np.array_equal(a, b)


@needs_ext
def test_maxpool_backends_bit_identical():
    rng = np.random.default_rng(3)
    for dtype in (np.float32, np.float64):
        x = rng.standard_normal((2, 3, 8, 6)).astype(dtype)
        # force ties inside some windows
        x[0, 0, 0, 0] = x[0, 0, 0, 1] = 7.5
        ya, ia = _kernels_py.maxpool2_forward(x)
        yb, ib = _kernels_cy.maxpool2_forward(x)
        assert np.array_equal(ya, yb)
        assert np.array_equal(ia, ib)
        gy = rng.standard_normal(ya.shape).astype(dtype)
        assert np.array_equal(_kernels_py.maxpool2_backward(gy, ia),
                              _kernels_cy.maxpool2_backward(gy, ib))


@pytest.mark.parametrize("impl", [_kernels_py] + ([_kernels_cy] if _kernels_cy else []))
@pytest.mark.parametrize("case", CASES)
def test_col2im_is_adjoint_of_im2col(impl, case):
    # <im2col(x), c> == <x, col2im(c)> characterizes the exact adjoint.
    n, c, h, w, kh, kw, sh, sw, dh, dw, ph, pw = case
    rng = np.random.default_rng(11)
    x = rng.standard_normal((n, c, h, w))
    cols = impl.im2col(x, kh, kw, sh, sw, dh, dw, ph, pw)
    cotangent = rng.standard_normal(cols.shape)
    ho = _kernels_py.conv_out_extent(h, kh, sh, dh, ph)
    wo = _kernels_py.conv_out_extent(w, kw, sw, dw, pw)
    back = impl.col2im(cotangent, h, w, kh, kw, sh, sw, dh, dw, ph, pw, ho, wo)
    assert np.isclose((cols * cotangent).sum(), (x * back).sum(), rtol=1e-12)


def test_maxpool_tie_takes_first_in_window_row_major_order():
    x = np.zeros((1, 1, 2, 2), dtype=np.float32)
    x[0, 0] = [[5.0, 5.0], [5.0, 5.0]]
    y, idx = _kernels_py.maxpool2_forward(x)
    assert y[0, 0, 0, 0] == 5.0
    assert idx[0, 0, 0, 0] == 0
    gy = np.ones_like(y)
    gx = _kernels_py.maxpool2_backward(gy, idx)
    assert gx[0, 0, 0, 0] == 1.0 and gx.sum() == 1.0
