"""Differentiable operators over N x C x H x W tensors.

Every operator computes its forward result with NumPy (hot data movement
goes through :mod:`msdcanet.kernels`) and, when a tape is recording and an
input participates in gradients, registers a backward rule that accumulates
into the inputs' ``.grad``.

FLOP accounting counts the forward pass only, with one multiply-accumulate
as 2 FLOPs: convolutions and channel projections cost 2*MACs plus one add
per bias element; normalizations 8 per element; ReLU 1, sigmoid 4, GELU 10;
bilinear upsampling 6 per output element; max pooling 3 per window;
pure data movement (shift, concat) costs 0.
"""

from __future__ import annotations

import numpy as np
from scipy import special

from . import kernels
from .tensor import Tensor, accumulate_grad, add_flops, recording_tape


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def _check_same_dtype(*tensors):
    dts = {t.dtype for t in tensors if t is not None}
    if len(dts) > 1:
        raise ValueError(f"mixed dtypes {sorted(str(d) for d in dts)}; cast inputs to a common dtype")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast dimensions so g matches the original input shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (s, gs) in enumerate(zip(shape, g.shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    y = a.data + b.data
    add_flops(y.size)
    tape = recording_tape(a, b)
    out = Tensor(y, requires_grad=tape is not None)
    if tape is not None:
        def bwd(gy):
            if a.requires_grad:
                accumulate_grad(a, _unbroadcast(gy, a.data.shape))
            if b.requires_grad:
                accumulate_grad(b, _unbroadcast(gy, b.data.shape))
        tape.record(out, bwd)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, mul(b, -1.0))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; b may be a Tensor or a python scalar constant."""
    if not isinstance(b, Tensor):
        s = float(b)
        y = a.data * np.asarray(s, dtype=a.dtype)
        add_flops(y.size)
        tape = recording_tape(a)
        out = Tensor(y, requires_grad=tape is not None)
        if tape is not None:
            def bwd_scalar(gy):
                accumulate_grad(a, gy * np.asarray(s, dtype=a.dtype))
            tape.record(out, bwd_scalar)
        return out

    _check_same_dtype(a, b)
    y = a.data * b.data
    add_flops(y.size)
    tape = recording_tape(a, b)
    out = Tensor(y, requires_grad=tape is not None)
    if tape is not None:
        def bwd(gy):
            if a.requires_grad:
                accumulate_grad(a, _unbroadcast(gy * b.data, a.data.shape))
            if b.requires_grad:
                accumulate_grad(b, _unbroadcast(gy * a.data, b.data.shape))
        tape.record(out, bwd)
    return out


def tensor_sum(x: Tensor) -> Tensor:
    y = np.asarray(x.data.sum(), dtype=x.dtype)
    add_flops(x.size)
    tape = recording_tape(x)
    out = Tensor(y, requires_grad=tape is not None)
    if tape is not None:
        def bwd(gy):
            accumulate_grad(x, np.full(x.data.shape, gy, dtype=x.dtype))
        tape.record(out, bwd)
    return out


def tensor_mean(x: Tensor) -> Tensor:
    return mul(tensor_sum(x), 1.0 / x.size)


def concat(xs, axis: int = 1) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ValueError("concat needs at least one tensor")
    _check_same_dtype(*xs)
    ref = xs[0].shape
    for t in xs[1:]:
        if len(t.shape) != len(ref) or any(
            i != axis and t.shape[i] != ref[i] for i in range(len(ref))
        ):
            raise ValueError(f"concat shape mismatch along non-concat axes: {[tuple(t.shape) for t in xs]}")
    y = np.concatenate([t.data for t in xs], axis=axis)
    tape = recording_tape(*xs)
    out = Tensor(y, requires_grad=tape is not None)
    if tape is not None:
        sizes = [t.shape[axis] for t in xs]
        offsets = np.cumsum([0] + sizes)
        def bwd(gy):
            for t, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * gy.ndim
                    sl[axis] = slice(lo, hi)
                    accumulate_grad(t, gy[tuple(sl)])
        tape.record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)
    add_flops(x.size)
    tape = recording_tape(x)
    out = Tensor(y, requires_grad=tape is not None)
    if tape is not None:
        mask = x.data > 0
        def bwd(gy):
            accumulate_grad(x, gy * mask)
        tape.record(out, bwd)
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    add_flops(4 * x.size)
    tape = recording_tape(x)
    out = Tensor(y, requires_grad=tape is not None)
    if tape is not None:
        def bwd(gy):
            accumulate_grad(x, gy * y * (1.0 - y))
        tape.record(out, bwd)
    return out


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x), not the tanh approximation."""
    z = x.data
    phi_cdf = 0.5 * (1.0 + special.erf(z / np.sqrt(np.asarray(2.0, dtype=z.dtype))))
    y = z * phi_cdf
    add_flops(10 * x.size)
    tape = recording_tape(x)
    out = Tensor(y, requires_grad=tape is not None)
    if tape is not None:
        def bwd(gy):
            pdf = np.exp(-0.5 * z * z) / np.sqrt(np.asarray(2.0 * np.pi, dtype=z.dtype))
            accumulate_grad(x, gy * (phi_cdf + z * pdf))
        tape.record(out, bwd)
    return out


_ACTIVATIONS = {"relu": relu, "gelu": gelu, "sigmoid": sigmoid}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None


# ---------------------------------------------------------------------------
# convolution and projections


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0,
           dilation=1, groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding, dilation, channel groups.

    x: (N, Cin, H, W); w: (Cout, Cin/groups, kh, kw); b: (Cout,) or None.
    groups == Cin with Cout == Cin is a depthwise convolution.
    """
    if x.data.ndim != 4:
        raise ValueError(f"conv2d input must be 4-D NCHW, got shape {tuple(x.shape)}")
    if w.data.ndim != 4:
        raise ValueError(f"conv2d weight must be 4-D, got shape {tuple(w.shape)}")
    _check_same_dtype(x, w, b)
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    groups = int(groups)
    if groups < 1 or cin % groups or cout % groups:
        raise ValueError(f"channel/group mismatch: Cin={cin}, Cout={cout}, groups={groups}")
    if cin_g != cin // groups:
        raise ValueError(f"weight expects {cin_g * groups} input channels, input has {cin}")
    if b is not None and tuple(b.shape) != (cout,):
        raise ValueError(f"bias shape {tuple(b.shape)} does not match Cout={cout}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    dh, dw = _pair(dilation)
    ho = kernels.conv_out_extent(h, kh, sh, dh, ph)
    wo = kernels.conv_out_extent(wd, kw, sw, dw, pw)
    if ho < 1 or wo < 1:
        raise ValueError(f"empty convolution output for input {h}x{wd}, kernel {kh}x{kw}, "
                         f"stride {sh}x{sw}, dilation {dh}x{dw}, padding {ph}x{pw}")

    cols = kernels.im2col(x.data, kh, kw, sh, sw, dh, dw, ph, pw)
    span = ho * wo
    k = cin_g * kh * kw
    cols_g = cols.reshape(n, groups, k, span)
    w_g = w.data.reshape(groups, cout // groups, k)
    y = np.matmul(w_g, cols_g).reshape(n, cout, ho, wo)
    if b is not None:
        y += b.data.reshape(1, cout, 1, 1)
    add_flops(2 * n * cout * span * k + (n * cout * span if b is not None else 0))

    tape = recording_tape(x, w, b)
    out = Tensor(y, requires_grad=tape is not None)
    if tape is not None:
        def bwd(gy):
            gy_g = gy.reshape(n, groups, cout // groups, span)
            if w.requires_grad:
                gw = np.matmul(gy_g, cols_g.transpose(0, 1, 3, 2)).sum(axis=0)
                accumulate_grad(w, gw.reshape(w.data.shape))
            if b is not None and b.requires_grad:
                accumulate_grad(b, gy.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gcols = np.matmul(w_g.transpose(0, 2, 1), gy_g)
                gx = kernels.col2im(gcols.reshape(n, cin * kh * kw, span),
                                    h, wd, kh, kw, sh, sw, dh, dw, ph, pw, ho, wo)
                accumulate_grad(x, gx)
        tape.record(out, bwd)
    return out


def dense_channel_projection(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-position linear map over channels; equivalent to a 1x1 conv2d."""
    if x.data.ndim != 4 or w.data.ndim != 2:
        raise ValueError(f"expected NCHW input and (Cout, Cin) weight, got {tuple(x.shape)} / {tuple(w.shape)}")
    _check_same_dtype(x, w, b)
    n, c, h, wd = x.shape
    cout, cin = w.shape
    if cin != c:
        raise ValueError(f"projection expects {cin} channels, input has {c}")
    if b is not None and tuple(b.shape) != (cout,):
        raise ValueError(f"bias shape {tuple(b.shape)} does not match Cout={cout}")
    xm = np.ascontiguousarray(x.data.reshape(n, c, h * wd))
    y = np.matmul(w.data, xm)
    if b is not None:
        y += b.data.reshape(1, cout, 1)
    y = y.reshape(n, cout, h, wd)
    add_flops(2 * n * cout * cin * h * wd + (n * cout * h * wd if b is not None else 0))

    tape = recording_tape(x, w, b)
    out = Tensor(y, requires_grad=tape is not None)
    if tape is not None:
        def bwd(gy):
            gym = gy.reshape(n, cout, h * wd)
            if w.requires_grad:
                accumulate_grad(w, np.matmul(gym, xm.transpose(0, 2, 1)).sum(axis=0))
            if b is not None and b.requires_grad:
                accumulate_grad(b, gy.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                accumulate_grad(x, np.matmul(w.data.T, gym).reshape(x.data.shape))
        tape.record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# axial shift

_SHIFT_AXES = {"width": 3, "height": 2}


def _group_bounds(c: int, k: int) -> list[tuple[int, int]]:
    # np.array_split convention: first (c % k) groups get one extra channel.
    base, rem = divmod(c, k)
    bounds, lo = [], 0
    for g in range(k):
        hi = lo + base + (1 if g < rem else 0)
        bounds.append((lo, hi))
        lo = hi
    return bounds


def _shift_arrays(a: np.ndarray, axis: int, offsets, bounds) -> np.ndarray:
    ext = a.shape[axis]
    out = np.zeros_like(a)
    for (lo, hi), off in zip(bounds, offsets):
        src = [slice(None)] * a.ndim
        dst = [slice(None)] * a.ndim
        src[1] = dst[1] = slice(lo, hi)
        if off > 0:
            dst[axis] = slice(off, ext)
            src[axis] = slice(0, ext - off)
        elif off < 0:
            dst[axis] = slice(0, ext + off)
            src[axis] = slice(-off, ext)
        out[tuple(dst)] = a[tuple(src)]
    return out


def axial_shift(x: Tensor, axis: str, offsets) -> Tensor:
    """Translate channel groups along one spatial axis, zero-filling vacated cells.

    Channels split into len(offsets) contiguous groups, as evenly as possible
    with larger groups first; group g translates by offsets[g] along `axis`
    (positive moves content toward higher indices). The gradient is the
    opposite shift.
    """
    if axis not in _SHIFT_AXES:
        raise ValueError(f"axis must be 'width' or 'height', got {axis!r}")
    ax = _SHIFT_AXES[axis]
    if x.data.ndim != 4:
        raise ValueError(f"axial_shift input must be 4-D NCHW, got {tuple(x.shape)}")
    offsets = [int(o) for o in offsets]
    c = x.shape[1]
    ext = x.shape[ax]
    if not 1 <= len(offsets) <= c:
        raise ValueError(f"need between 1 and C={c} offsets, got {len(offsets)}")
    if any(abs(o) >= ext for o in offsets):
        raise ValueError(f"|offset| must be < {axis} extent {ext}, got {offsets}")
    bounds = _group_bounds(c, len(offsets))
    y = _shift_arrays(x.data, ax, offsets, bounds)
    tape = recording_tape(x)
    out = Tensor(y, requires_grad=tape is not None)
    if tape is not None:
        neg = [-o for o in offsets]
        def bwd(gy):
            accumulate_grad(x, _shift_arrays(gy, ax, neg, bounds))
        tape.record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# pooling / upsampling


def maxpool2(x: Tensor) -> Tensor:
    """2x2 stride-2 max pooling; gradient goes to the first argmax per window."""
    if x.data.ndim != 4:
        raise ValueError(f"maxpool2 input must be 4-D NCHW, got {tuple(x.shape)}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial extents, got {h}x{w}")
    y, idx = kernels.maxpool2_forward(x.data)
    add_flops(3 * y.size)
    tape = recording_tape(x)
    out = Tensor(y, requires_grad=tape is not None)
    if tape is not None:
        def bwd(gy):
            accumulate_grad(x, kernels.maxpool2_backward(gy, idx))
        tape.record(out, bwd)
    return out


def bilinear_matrix(n_src: int, n_dst: int, dtype=np.float64) -> np.ndarray:
    """(n_dst, n_src) interpolation matrix, align-corners=false convention.

    Destination cell i samples source coordinate (i + 0.5) * n_src/n_dst - 0.5
    and blends its floor/ceil neighbours, clamped at the edges.
    """
    src = (np.arange(n_dst, dtype=np.float64) + 0.5) * (n_src / n_dst) - 0.5
    i0 = np.floor(src).astype(np.intp)
    frac = src - i0
    i1 = np.clip(i0 + 1, 0, n_src - 1)
    i0 = np.clip(i0, 0, n_src - 1)
    m = np.zeros((n_dst, n_src), dtype=dtype)
    rows = np.arange(n_dst)
    m[rows, i0] += (1.0 - frac).astype(dtype)
    m[rows, i1] += frac.astype(dtype)
    return m


def upsample_bilinear2(x: Tensor) -> Tensor:
    """Bilinear x2 upsampling along both spatial axes (align-corners=false)."""
    if x.data.ndim != 4:
        raise ValueError(f"upsample input must be 4-D NCHW, got {tuple(x.shape)}")
    n, c, h, w = x.shape
    ur = bilinear_matrix(h, 2 * h, x.dtype)
    uc = bilinear_matrix(w, 2 * w, x.dtype)
    xm = x.data.reshape(n * c, h, w)
    y = np.matmul(np.matmul(ur, xm), uc.T).reshape(n, c, 2 * h, 2 * w)
    add_flops(6 * y.size)
    tape = recording_tape(x)
    out = Tensor(y, requires_grad=tape is not None)
    if tape is not None:
        def bwd(gy):
            gm = gy.reshape(n * c, 2 * h, 2 * w)
            gx = np.matmul(np.matmul(ur.T, gm), uc).reshape(n, c, h, w)
            accumulate_grad(x, gx)
        tape.record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# normalization


class RunningStats:
    """Per-channel running mean/variance used by batch_norm in eval mode."""

    __slots__ = ("mean", "var")

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running: RunningStats | None,
               training: bool, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Per-channel normalization over (N, H, W).

    Training mode normalizes with batch statistics (biased variance) and
    updates the running stats in place (unbiased variance, PyTorch-style);
    eval mode normalizes with the running stats.
    """
    if x.data.ndim != 4:
        raise ValueError(f"batch_norm input must be 4-D NCHW, got {tuple(x.shape)}")
    n, c, h, w = x.shape
    if n < 1:
        raise ValueError("batch_norm needs a non-empty batch")
    _check_same_dtype(x, gamma, beta)
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if running is not None:
            count = n * h * w
            unbiased = var * (count / (count - 1)) if count > 1 else var
            running.mean += momentum * (mu - running.mean)
            running.var += momentum * (unbiased - running.var)
    else:
        if running is None:
            raise ValueError("eval-mode batch_norm needs running statistics")
        mu, var = running.mean, running.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    y = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)
    add_flops(8 * x.size)

    tape = recording_tape(x, gamma, beta)
    out = Tensor(y, requires_grad=tape is not None)
    if tape is not None:
        def bwd(gy):
            if gamma.requires_grad:
                accumulate_grad(gamma, (gy * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                accumulate_grad(beta, gy.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gsc = gy * gamma.data.reshape(1, c, 1, 1)
                if training:
                    m1 = gsc.mean(axis=(0, 2, 3), keepdims=True)
                    m2 = (gsc * xhat).mean(axis=(0, 2, 3), keepdims=True)
                    gx = inv.reshape(1, c, 1, 1) * (gsc - m1 - xhat * m2)
                else:
                    gx = gsc * inv.reshape(1, c, 1, 1)
                accumulate_grad(x, gx)
        tape.record(out, bwd)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the channel axis, independently per (n, h, w)."""
    if x.data.ndim != 4:
        raise ValueError(f"layer_norm input must be 4-D NCHW, got {tuple(x.shape)}")
    n, c, h, w = x.shape
    _check_same_dtype(x, gamma, beta)
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    y = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)
    add_flops(8 * x.size)

    tape = recording_tape(x, gamma, beta)
    out = Tensor(y, requires_grad=tape is not None)
    if tape is not None:
        def bwd(gy):
            if gamma.requires_grad:
                accumulate_grad(gamma, (gy * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                accumulate_grad(beta, gy.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gsc = gy * gamma.data.reshape(1, c, 1, 1)
                m1 = gsc.mean(axis=1, keepdims=True)
                m2 = (gsc * xhat).mean(axis=1, keepdims=True)
                accumulate_grad(x, inv * (gsc - m1 - xhat * m2))
        tape.record(out, bwd)
    return out
