"""The four architectural units: DC block, attention gate, tokenized MLP
block, and the Res-ASPP bottleneck, plus the small layer primitives they
are assembled from.

Blocks are callable parameter containers; `training` is passed per call
(batch norm is the only stateful piece, mutating its running stats while
training). Parameter init is drawn from an explicit numpy Generator so a
build seed fixes every weight.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor


class Module:
    """Minimal parameter container with recursive named traversal.

    Attributes that are Tensors count as parameters, RunningStats as
    buffers, Modules (or lists/tuples of Modules) as children; traversal
    order follows attribute assignment order, so parameter naming is
    deterministic for a given construction.
    """

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, ops.RunningStats):
                yield name, value
            elif isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Tensor, Module, ops.RunningStats)):
                        yield f"{name}.{i}", item

    def named_params(self, prefix: str = ""):
        for name, value in self._children():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_params(f"{path}.")

    def named_buffers(self, prefix: str = ""):
        for name, value in self._children():
            path = f"{prefix}{name}"
            if isinstance(value, ops.RunningStats):
                yield f"{path}.mean", value.mean
                yield f"{path}.var", value.var
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{path}.")

    def params(self) -> list[Tensor]:
        return [p for _, p in self.named_params()]

    def zero_grads(self) -> None:
        for p in self.params():
            p.zero_grad()


def _conv_weight(rng, cout, cin_g, kh, kw, dtype):
    fan_in = cin_g * kh * kw
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin_g, kh, kw))
    return Tensor(w.astype(dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, rng, dtype=np.float32, stride=1,
                 padding=0, dilation=1, groups=1, bias=True):
        self.w = _conv_weight(rng, cout, cin // groups, kernel, kernel, dtype)
        self.b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        self.groups = groups

    def __call__(self, x, training=False):
        return ops.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding,
                          dilation=self.dilation, groups=self.groups)


class BatchNorm(Module):
    def __init__(self, channels, dtype=np.float32, eps=1e-5, momentum=0.1):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running = ops.RunningStats(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x, training=False):
        return ops.batch_norm(x, self.gamma, self.beta, self.running, training,
                              eps=self.eps, momentum=self.momentum)


class LayerNorm(Module):
    def __init__(self, channels, dtype=np.float32, eps=1e-5):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x, training=False):
        return ops.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class DenseProjection(Module):
    """Per-position channel projection (1x1-conv equivalent)."""

    def __init__(self, cin, cout, rng, dtype=np.float32):
        w = rng.normal(0.0, np.sqrt(2.0 / cin), (cout, cin))
        self.w = Tensor(w.astype(dtype), requires_grad=True)
        self.b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def __call__(self, x, training=False):
        return ops.dense_channel_projection(x, self.w, self.b)


class ConvBNRelu(Module):
    """Conv -> BatchNorm -> ReLU, the normalize-before-activation discipline."""

    def __init__(self, cin, cout, kernel, rng, dtype=np.float32, stride=1,
                 padding=0, dilation=1, groups=1):
        self.conv = Conv2d(cin, cout, kernel, rng, dtype, stride=stride,
                           padding=padding, dilation=dilation, groups=groups)
        self.bn = BatchNorm(cout, dtype)

    def __call__(self, x, training=False):
        return ops.relu(self.bn(self.conv(x), training))


class DCBlock(Module):
    """Dual-channel block: two parallel three-layer 3x3 conv branches of
    widths floor(W/6) -> floor(W/3) -> floor(W/2), concatenated, plus a 1x1
    residual projection of the block input. Output channels = 2*floor(W/2).
    """

    def __init__(self, cin, width, rng, dtype=np.float32, residual=True):
        width = int(width)
        if width < 6:
            raise ValueError(f"DC block width must be >= 6, got {width}")
        if width % 2:
            raise ValueError(f"DC block width must be even, got {width}")
        self.width = width
        widths = (width // 6, width // 3, width // 2)
        self.out_channels = 2 * widths[2]
        self.branch_a = self._branch(cin, widths, rng, dtype)
        self.branch_b = self._branch(cin, widths, rng, dtype)
        self.skip = Conv2d(cin, self.out_channels, 1, rng, dtype) if residual else None

    @staticmethod
    def _branch(cin, widths, rng, dtype):
        layers = []
        prev = cin
        for w in widths:
            layers.append(ConvBNRelu(prev, w, 3, rng, dtype, padding=1))
            prev = w
        return layers

    def __call__(self, x, training=False):
        a = x
        for layer in self.branch_a:
            a = layer(a, training)
        b = x
        for layer in self.branch_b:
            b = layer(b, training)
        out = ops.concat([a, b], axis=1)
        if self.skip is not None:
            out = ops.add(out, self.skip(x))
        return out


class AttentionGate(Module):
    """Additive gate on a skip connection, driven by decoder context.

    alpha = sigmoid(psi(relu(Wx*x_skip + Wg*g))) in (0,1) per position;
    output = x_skip * alpha, broadcast over channels. The intermediate
    width is half the skip channels (minimum 1).
    """

    def __init__(self, c_skip, c_gate, rng, dtype=np.float32):
        inter = max(c_skip // 2, 1)
        self.wx = Conv2d(c_skip, inter, 1, rng, dtype)
        self.wg = Conv2d(c_gate, inter, 1, rng, dtype)
        self.psi = Conv2d(inter, 1, 1, rng, dtype)

    def __call__(self, x_skip, g, training=False):
        if x_skip.shape[2:] != g.shape[2:]:
            raise ValueError(f"attention gate spatial mismatch: skip {tuple(x_skip.shape)} "
                             f"vs gate {tuple(g.shape)}")
        alpha = ops.sigmoid(self.psi(ops.relu(ops.add(self.wx(x_skip), self.wg(g)))))
        return ops.mul(x_skip, alpha)


class TokenizedMLPBlock(Module):
    """Shift-MLP attention unit operating at a fixed embedding width E.

    Pipeline: project -> width shift -> project; token MLP followed by a 3x3
    depthwise conv with GELU; project -> height shift -> project; final
    token MLP added back to the block input, layer-normalized over channels,
    and projected once more. Output shape equals input shape.
    """

    def __init__(self, e, rng, dtype=np.float32, offsets=(-2, -1, 0, 1, 2)):
        self.e = int(e)
        self.offsets = tuple(int(o) for o in offsets)
        self.proj_w_in = DenseProjection(e, e, rng, dtype)
        self.proj_w_out = DenseProjection(e, e, rng, dtype)
        self.mlp_w = DenseProjection(e, e, rng, dtype)
        self.dwconv = Conv2d(e, e, 3, rng, dtype, padding=1, groups=e)
        self.proj_h_in = DenseProjection(e, e, rng, dtype)
        self.proj_h_out = DenseProjection(e, e, rng, dtype)
        self.mlp_h = DenseProjection(e, e, rng, dtype)
        self.norm = LayerNorm(e, dtype)
        self.proj_out = DenseProjection(e, e, rng, dtype)

    def __call__(self, x, training=False):
        if x.shape[1] != self.e:
            raise ValueError(f"tokenized MLP block expects {self.e} channels, got {x.shape[1]}")
        t = self.proj_w_out(ops.axial_shift(self.proj_w_in(x), "width", self.offsets))
        t = ops.gelu(self.dwconv(self.mlp_w(t)))
        t = self.proj_h_out(ops.axial_shift(self.proj_h_in(t), "height", self.offsets))
        return self.proj_out(self.norm(ops.add(x, self.mlp_h(t))))


class ResASPP(Module):
    """Bottleneck of four residual dilated-conv branches.

    Each branch is a 3x3 conv with dilation rate r and padding r (so spatial
    shape is preserved; taps that fall outside the map read zeros), followed
    by BN and ReLU; branch width is C/4 (minimum 1). Branch outputs are
    concatenated, fused by a 1x1 conv back to C channels, and added to the
    block input.
    """

    def __init__(self, channels, rates, rng, dtype=np.float32):
        rates = tuple(int(r) for r in rates)
        if any(r < 1 for r in rates) or any(b <= a for a, b in zip(rates, rates[1:])):
            raise ValueError(f"dilation rates must be strictly increasing positive integers, got {rates}")
        self.rates = rates
        bw = max(channels // 4, 1)
        self.branches = [ConvBNRelu(channels, bw, 3, rng, dtype, padding=r, dilation=r)
                         for r in rates]
        self.fuse = Conv2d(len(rates) * bw, channels, 1, rng, dtype)

    def __call__(self, x, training=False):
        feats = [branch(x, training) for branch in self.branches]
        return ops.add(x, self.fuse(ops.concat(feats, axis=1)))
