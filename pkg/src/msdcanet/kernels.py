"""Kernel backend selection.

The hot data-movement kernels (patch unfolding for convolution, 2x2 max
pooling) exist twice: a compiled Cython extension and a pure-NumPy fallback.
The compiled one is used when importable; set ``MSDCA_KERNELS=py`` or
``MSDCA_KERNELS=cy`` to force a backend. Both produce bit-identical results,
which the test suite asserts.
"""

import os

import numpy as np

from . import _kernels_py

_REQUESTED = os.environ.get("MSDCA_KERNELS", "auto")
if _REQUESTED not in ("auto", "py", "cy"):
    raise ValueError(f"MSDCA_KERNELS must be one of auto|py|cy, got {_REQUESTED!r}")

if _REQUESTED == "py":
    _impl = _kernels_py
    BACKEND = "py"
else:
    try:
        from . import _kernels_cy as _impl  # type: ignore[attr-defined]

        BACKEND = "cy"
    except ImportError:
        if _REQUESTED == "cy":
            raise
        _impl = _kernels_py
        BACKEND = "py"

conv_out_extent = _kernels_py.conv_out_extent


def _c(a):
    return np.ascontiguousarray(a)


def im2col(x, kh, kw, sh, sw, dh, dw, ph, pw):
    return _impl.im2col(_c(x), kh, kw, sh, sw, dh, dw, ph, pw)


def col2im(cols, h, w, kh, kw, sh, sw, dh, dw, ph, pw, ho, wo):
    return _impl.col2im(_c(cols), h, w, kh, kw, sh, sw, dh, dw, ph, pw, ho, wo)


def maxpool2_forward(x):
    return _impl.maxpool2_forward(_c(x))


def maxpool2_backward(gy, idx):
    return _impl.maxpool2_backward(_c(gy), _c(idx))
