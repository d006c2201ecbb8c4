"""Finite-difference gradient verification.

`finite_diff_check` compares the tape's analytic gradients against central
differences; `run_suite` sweeps every differentiable operator and every
architectural block on several random shapes in float64, which is the
package's gradient acceptance gate (also exposed as `msdcanet gradcheck`).
"""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tape, Tensor

DEFAULT_EPS = 1e-4
DEFAULT_TOL = 1e-4
# Coordinates where both gradients are tiny are compared near-absolutely.
REL_FLOOR = 1e-3


def finite_diff_check(f, x, eps: float = DEFAULT_EPS) -> dict:
    """Check df/dx for a scalar-valued tensor function by central differences.

    `x` may be a single Tensor or a list of Tensors; every tensor with
    requires_grad=True is perturbed coordinate by coordinate. `f` must be
    deterministic; this is verified by evaluating it twice. Returns a report
    dict with max_rel_err / max_abs_err / coords_checked.
    """
    inputs = [x] if isinstance(x, Tensor) else list(x)
    checked = [t for t in inputs if t.requires_grad]
    if not checked:
        raise ValueError("finite_diff_check needs at least one requires_grad input")

    for t in inputs:
        t.zero_grad()
    with Tape() as tape:
        y = f(*inputs)
    if y.size != 1:
        raise ValueError(f"f must be scalar-valued, got shape {tuple(y.shape)}")
    y0 = y.item()
    tape.backward(y)
    analytic = [np.zeros_like(t.data) if t.grad is None else np.array(t.grad, dtype=t.dtype)
                for t in checked]

    if f(*inputs).item() != y0:
        raise ValueError("f is not deterministic; cannot finite-difference it")

    max_rel = 0.0
    max_abs = 0.0
    coords = 0
    for t, a in zip(checked, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            y_plus = f(*inputs).item()
            flat[i] = orig - eps
            y_minus = f(*inputs).item()
            flat[i] = orig
            numeric = (y_plus - y_minus) / (2.0 * eps)
            ai = float(a.reshape(-1)[i])
            diff = abs(ai - numeric)
            denom = max(abs(ai), abs(numeric), REL_FLOOR)
            max_rel = max(max_rel, diff / denom)
            max_abs = max(max_abs, diff)
            coords += 1
    return {"max_rel_err": max_rel, "max_abs_err": max_abs, "coords_checked": coords}


def _rng_tensor(rng, shape, scale=1.0, shift=0.0):
    return Tensor((rng.standard_normal(shape) * scale + shift), requires_grad=True)


def _away_from_zero(rng, shape, margin=0.05):
    # Keeps pre-activation magnitudes away from ReLU kinks.
    a = rng.standard_normal(shape)
    return Tensor(a + np.sign(a) * margin + (a == 0) * margin, requires_grad=True)


def _distinct_windows(rng, shape):
    # Unique values inside each 2x2 pooling window so the argmax is stable.
    a = rng.standard_normal(shape)
    ramp = np.arange(a.size, dtype=np.float64).reshape(shape) * 1e-3
    return Tensor(a + ramp, requires_grad=True)


def op_cases(seed: int = 0):
    """(name, f, inputs, eps) cases for every differentiable operator."""
    rng = np.random.default_rng(seed)
    cases = []

    for i, shape in enumerate([(1, 2, 4, 4), (2, 3, 5, 5), (1, 1, 6, 3)]):
        x = _rng_tensor(rng, shape)
        w = _rng_tensor(rng, (3, shape[1], 3, 3), scale=0.5)
        b = _rng_tensor(rng, (3,), scale=0.1)
        cases.append((f"conv2d/pad1[{i}]",
                      lambda x, w, b: ops.tensor_sum(ops.mul(ops.conv2d(x, w, b, padding=1), 0.5)),
                      [x, w, b], DEFAULT_EPS))

    x = _rng_tensor(rng, (1, 4, 6, 6))
    w = _rng_tensor(rng, (4, 2, 3, 3), scale=0.5)
    cases.append(("conv2d/dilated-grouped",
                  lambda x, w: ops.tensor_sum(ops.conv2d(x, w, None, padding=2, dilation=2, groups=2)),
                  [x, w], DEFAULT_EPS))
    x = _rng_tensor(rng, (2, 3, 6, 6))
    w = _rng_tensor(rng, (3, 1, 3, 3), scale=0.5)
    b = _rng_tensor(rng, (3,), scale=0.1)
    cases.append(("conv2d/depthwise-stride2",
                  lambda x, w, b: ops.tensor_sum(ops.conv2d(x, w, b, stride=2, padding=1, groups=3)),
                  [x, w, b], DEFAULT_EPS))

    for i, (shape, offs) in enumerate([((1, 10, 6, 6), (-2, -1, 0, 1, 2)),
                                       ((2, 4, 5, 4), (1, -1)),
                                       ((1, 3, 4, 7), (0, 2, -2))]):
        x = _rng_tensor(rng, shape)
        axis = "width" if i % 2 == 0 else "height"
        cases.append((f"axial_shift/{axis}[{i}]",
                      lambda x, axis=axis, offs=offs: ops.tensor_sum(
                          ops.mul(ops.axial_shift(x, axis, offs), ops.mul(x, 0.5))),
                      [x], DEFAULT_EPS))

    for i, shape in enumerate([(1, 1, 4, 4), (2, 3, 6, 6), (1, 2, 8, 4)]):
        x = _distinct_windows(rng, shape)
        cases.append((f"maxpool2[{i}]",
                      lambda x: ops.tensor_sum(ops.mul(ops.maxpool2(x), 0.25)),
                      [x], 1e-6))

    for i, shape in enumerate([(1, 1, 3, 3), (2, 2, 4, 5), (1, 3, 1, 1)]):
        x = _rng_tensor(rng, shape)
        cases.append((f"upsample_bilinear2[{i}]",
                      lambda x: ops.tensor_sum(ops.mul(ops.upsample_bilinear2(x), 0.3)),
                      [x], DEFAULT_EPS))

    for i, shape in enumerate([(2, 3, 4, 4), (4, 2, 3, 3), (3, 1, 5, 5)]):
        x = _rng_tensor(rng, shape)
        g = _rng_tensor(rng, (shape[1],), scale=0.5, shift=1.0)
        bt = _rng_tensor(rng, (shape[1],), scale=0.2)
        for mode, training in (("train", True), ("eval", False)):
            stats = ops.RunningStats(shape[1], dtype=np.float64)
            stats.mean += rng.standard_normal(shape[1]) * 0.1
            stats.var += np.abs(rng.standard_normal(shape[1])) * 0.1
            cases.append((f"batch_norm/{mode}[{i}]",
                          lambda x, g, bt, stats=stats, training=training: ops.tensor_sum(
                              ops.mul(ops.batch_norm(x, g, bt, stats, training=training), 0.5)),
                          [x, g, bt], DEFAULT_EPS))

    for i, shape in enumerate([(1, 4, 3, 3), (2, 6, 2, 2), (1, 3, 4, 4)]):
        x = _rng_tensor(rng, shape)
        g = _rng_tensor(rng, (shape[1],), scale=0.5, shift=1.0)
        bt = _rng_tensor(rng, (shape[1],), scale=0.2)
        cases.append((f"layer_norm[{i}]",
                      lambda x, g, bt: ops.tensor_sum(ops.mul(ops.layer_norm(x, g, bt), 0.5)),
                      [x, g, bt], DEFAULT_EPS))

    for i, shape in enumerate([(2, 3), (1, 2, 4, 4), (5,)]):
        x = _away_from_zero(rng, shape)
        cases.append((f"relu[{i}]", lambda x: ops.tensor_sum(ops.mul(ops.relu(x), 0.7)), [x], 1e-6))
        y = _rng_tensor(rng, shape)
        cases.append((f"gelu[{i}]", lambda y: ops.tensor_sum(ops.mul(ops.gelu(y), 0.7)), [y], DEFAULT_EPS))
        z = _rng_tensor(rng, shape)
        cases.append((f"sigmoid[{i}]", lambda z: ops.tensor_sum(ops.mul(ops.sigmoid(z), 0.7)), [z], DEFAULT_EPS))

    for i, shape in enumerate([(1, 3, 4, 4), (2, 5, 2, 2), (1, 2, 3, 5)]):
        x = _rng_tensor(rng, shape)
        w = _rng_tensor(rng, (4, shape[1]), scale=0.5)
        b = _rng_tensor(rng, (4,), scale=0.1)
        cases.append((f"dense_channel_projection[{i}]",
                      lambda x, w, b: ops.tensor_sum(ops.mul(ops.dense_channel_projection(x, w, b), 0.5)),
                      [x, w, b], DEFAULT_EPS))

    for i, (ca, cb) in enumerate([(2, 3), (1, 1), (4, 2)]):
        a = _rng_tensor(rng, (1, ca, 3, 3))
        bT = _rng_tensor(rng, (1, cb, 3, 3))
        cases.append((f"concat+add+mul[{i}]",
                      lambda a, bT: ops.tensor_sum(
                          ops.mul(ops.concat([a, bT], axis=1), ops.concat([a, bT], axis=1))),
                      [a, bT], DEFAULT_EPS))

    a = _rng_tensor(rng, (2, 3, 2, 2))
    bc = _rng_tensor(rng, (2, 1, 2, 2))
    cases.append(("mul/broadcast", lambda a, bc: ops.tensor_sum(ops.mul(a, bc)), [a, bc], DEFAULT_EPS))
    cases.append(("add/broadcast", lambda a, bc: ops.tensor_sum(ops.mul(ops.add(a, bc), ops.add(a, bc))),
                  [a, bc], DEFAULT_EPS))
    return cases


def block_cases(seed: int = 1):
    """(name, f, inputs, eps) cases for the four architectural blocks."""
    from . import blocks  # local import: blocks depends on ops

    rng = np.random.default_rng(seed)
    cases = []

    for i, (cin, width) in enumerate([(3, 12), (2, 8), (4, 16)]):
        blk = blocks.DCBlock(cin, width, rng=rng, dtype=np.float64)
        x = _rng_tensor(rng, (1, cin, 5, 5))
        params = [x] + [p for _, p in blk.named_params()]
        cases.append((f"dc_block/W{width}[{i}]",
                      lambda *ts, blk=blk: ops.tensor_sum(ops.mul(blk(ts[0], training=True), 0.3)),
                      params, 1e-6))

    for i, (cs, cg) in enumerate([(4, 4), (2, 6), (5, 3)]):
        gate = blocks.AttentionGate(cs, cg, rng=rng, dtype=np.float64)
        xs = _rng_tensor(rng, (1, cs, 4, 4))
        g = _rng_tensor(rng, (1, cg, 4, 4))
        params = [xs, g] + [p for _, p in gate.named_params()]
        cases.append((f"attention_gate[{i}]",
                      lambda *ts, gate=gate: ops.tensor_sum(ops.mul(gate(ts[0], ts[1], training=True), 0.5)),
                      params, 1e-6))

    for i, (e, offs) in enumerate([(10, (-2, -1, 0, 1, 2)), (6, (-1, 0, 1)), (8, (1, -1))]):
        blk = blocks.TokenizedMLPBlock(e, rng=rng, dtype=np.float64, offsets=offs)
        x = _rng_tensor(rng, (1, e, 6, 6))
        params = [x] + [p for _, p in blk.named_params()]
        cases.append((f"tokenized_mlp_block/E{e}[{i}]",
                      lambda *ts, blk=blk: ops.tensor_sum(ops.mul(blk(ts[0], training=True), 0.3)),
                      params, DEFAULT_EPS))

    for i, (c, rates) in enumerate([(8, (1, 2, 3, 4)), (4, (2, 4, 8, 12)), (8, (4, 8, 16, 24))]):
        blk = blocks.ResASPP(c, rates, rng=rng, dtype=np.float64)
        x = _rng_tensor(rng, (1, c, 6, 6))
        params = [x] + [p for _, p in blk.named_params()]
        cases.append((f"res_aspp/r{rates[0]}[{i}]",
                      lambda *ts, blk=blk: ops.tensor_sum(ops.mul(blk(ts[0], training=True), 0.3)),
                      params, 1e-6))
    return cases


def run_suite(seed: int = 0, tol: float = DEFAULT_TOL, include_blocks: bool = True):
    """Run every gradient case; returns a list of (name, report, passed)."""
    cases = op_cases(seed)
    if include_blocks:
        cases += block_cases(seed + 1)
    results = []
    for name, f, inputs, eps in cases:
        report = finite_diff_check(f, inputs, eps=eps)
        results.append((name, report, report["max_rel_err"] < tol))
    return results
