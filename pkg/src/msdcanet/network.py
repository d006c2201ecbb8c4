"""Model assembly: MS-DCANet (S/M/L presets), a plain UNet baseline,
parameter/FLOP accounting and the binary checkpoint format.

Layout of MS-DCANet: four encoder stages at channel widths C1..C4, a
Res-ASPP bottleneck at C5, and a mirrored decoder. Stages listed in
`tok_mlp_stages` are tokenized-MLP stages, the rest are DC-block stages;
the decoder mirrors the encoder's stage kinds. Resolution halves exactly
four times on the way down (so inputs must be divisible by 16): a 2x2 max
pool follows a conv stage whose successor is another conv stage, while a
tokenized stage starts with a stride-2 3x3 patch-embedding conv that is its
own down-sampler; entering the bottleneck is always a stride-2 3x3 conv to
C5. Each decoder stage starts with bilinear x2 upsampling followed by a
3x3 conv onto that stage's width; skip fusion is attention-gated
concatenation at conv stages and plain addition at tokenized stages.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import blocks, ops
from .tensor import NumericError, Tensor, assert_finite, count_flops

VARIANT_CHANNELS = {
    "S": (8, 16, 32, 64, 128),
    "M": (16, 32, 128, 160, 256),
    "L": (32, 64, 128, 256, 512),
}

# Nominal serialized sizes (MB, 4-byte weights) of the named presets; the
# exact number depends on under-specified topology details, so comparisons
# use a wide documented tolerance.
VARIANT_REFERENCE_MB = {"S": 1.36, "M": 7.90, "L": 21.47}

CHECKPOINT_MAGIC = b"MSDC"
CHECKPOINT_VERSION = 1


class CheckpointFormatError(ValueError):
    """Malformed, truncated or unsupported checkpoint file."""


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "custom"
    channels: tuple[int, ...] = VARIANT_CHANNELS["S"]
    dilation_rates: tuple[int, ...] = (4, 8, 16, 24)
    tok_mlp_stages: frozenset[int] = frozenset({3, 4})
    shift_offsets: tuple[int, ...] = (-2, -1, 0, 1, 2)
    in_channels: int = 1
    out_classes: int = 1
    dc_blocks: bool = True
    res_aspp: bool = True
    attention_gates: bool = True

    def validate(self) -> "ModelConfig":
        if len(self.channels) != 5:
            raise ValueError(f"need 5 channel widths C1..C5, got {self.channels}")
        if any(c < 8 or c % 2 for c in self.channels):
            raise ValueError(f"channel widths must be even and >= 8, got {self.channels}")
        if not set(self.tok_mlp_stages) <= {2, 3, 4}:
            raise ValueError(f"tok_mlp_stages must be within {{2,3,4}}, got {sorted(self.tok_mlp_stages)}")
        rates = self.dilation_rates
        if any(r < 1 for r in rates) or any(b <= a for a, b in zip(rates, rates[1:])):
            raise ValueError(f"dilation rates must be strictly increasing positive integers, got {rates}")
        if self.in_channels < 1 or self.out_classes < 1:
            raise ValueError("in_channels and out_classes must be >= 1")
        return self

    @property
    def stage_kinds(self) -> tuple[str, ...]:
        return tuple("tok" if s in self.tok_mlp_stages else "dc" for s in (1, 2, 3, 4))


def variant_config(variant: str, in_channels: int = 1, **overrides) -> ModelConfig:
    try:
        channels = VARIANT_CHANNELS[variant]
    except KeyError:
        raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(VARIANT_CHANNELS)}") from None
    return ModelConfig(variant=variant, channels=channels, in_channels=in_channels,
                       **overrides).validate()


def _double_conv(cin, cout, rng, dtype):
    return [blocks.ConvBNRelu(cin, cout, 3, rng, dtype, padding=1),
            blocks.ConvBNRelu(cout, cout, 3, rng, dtype, padding=1)]


class _Seq(blocks.Module):
    def __init__(self, layers):
        self.layers = list(layers)

    def __call__(self, x, training=False):
        for layer in self.layers:
            x = layer(x, training)
        return x


class MSDCANet(blocks.Module):
    """See the module docstring for the stage layout."""

    kind = "msdcanet"

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        dtype = np.float32
        self._build(rng, dtype)

    def _conv_stage(self, cin, cout, rng, dtype):
        if self.cfg.dc_blocks:
            return blocks.DCBlock(cin, cout, rng, dtype)
        return _Seq(_double_conv(cin, cout, rng, dtype))

    def _build(self, rng, dtype):
        cfg = self.cfg
        c = cfg.channels
        kinds = cfg.stage_kinds

        self.enc_embed = []   # stride-2 patch embeds for tok stages (None at dc stages)
        self.enc_blocks = []
        prev = cfg.in_channels
        for i, kind in enumerate(kinds):
            width = c[i]
            if kind == "tok":
                self.enc_embed.append(blocks.Conv2d(prev, width, 3, rng, dtype, stride=2, padding=1))
                self.enc_blocks.append(blocks.TokenizedMLPBlock(width, rng, dtype, cfg.shift_offsets))
            else:
                self.enc_embed.append(None)
                self.enc_blocks.append(self._conv_stage(prev, width, rng, dtype))
            prev = width

        self.bottleneck_in = blocks.Conv2d(c[3], c[4], 3, rng, dtype, stride=2, padding=1)
        if cfg.res_aspp:
            self.bottleneck = blocks.ResASPP(c[4], cfg.dilation_rates, rng, dtype)
        else:
            self.bottleneck = blocks.ConvBNRelu(c[4], c[4], 3, rng, dtype, padding=1)

        self.dec_up = []      # 3x3 conv after bilinear x2, onto the stage width
        self.dec_fuse = []    # attention gates at dc stages (None at tok stages)
        self.dec_blocks = []
        above = c[4]
        for i in (3, 2, 1, 0):
            width = c[i]
            kind = kinds[i]
            self.dec_up.append(blocks.Conv2d(above, width, 3, rng, dtype, padding=1))
            if kind == "tok":
                self.dec_fuse.append(None)
                self.dec_blocks.append(blocks.TokenizedMLPBlock(width, rng, dtype, cfg.shift_offsets))
            else:
                gate = blocks.AttentionGate(width, width, rng, dtype) if cfg.attention_gates else None
                self.dec_fuse.append(gate)
                self.dec_blocks.append(self._conv_stage(2 * width, width, rng, dtype))
            above = width

        self.head = blocks.Conv2d(c[0], cfg.out_classes, 1, rng, dtype)

    @property
    def stage_kinds(self) -> tuple[str, ...]:
        return self.cfg.stage_kinds

    @property
    def decoder_stage_kinds(self) -> tuple[str, ...]:
        return tuple(reversed(self.cfg.stage_kinds))

    def tap_names(self) -> tuple[str, ...]:
        return ("enc1", "enc2", "enc3", "enc4", "bottleneck",
                "dec4", "dec3", "dec2", "dec1", "F3", "F4", "F5")

    def forward(self, x: Tensor, training: bool = False, taps=None):
        """Run the network; returns logits, or (logits, {tap: Tensor}) when
        `taps` names intermediate stage outputs to capture (F3/F4/F5 alias
        the stage-3 output, stage-4 output and bottleneck output).
        """
        if x.data.ndim != 4:
            raise ValueError(f"input must be NCHW, got shape {tuple(x.shape)}")
        n, cin, h, w = x.shape
        if cin != self.cfg.in_channels:
            raise ValueError(f"model expects {self.cfg.in_channels} input channels, got {cin}")
        if h % 16 or w % 16:
            raise ValueError(f"input spatial extents must be divisible by 16, got {h}x{w}")
        captured: dict[str, Tensor] = {}
        taps = set(taps or ())

        def _stage(name, value, aliases=()):
            assert_stage_finite(value, name)
            for key in (name, *aliases):
                if key in taps:
                    captured[key] = value
            return value

        kinds = self.cfg.stage_kinds
        skips = []
        cur = x
        for i, kind in enumerate(kinds):
            if kind == "tok":
                cur = self.enc_embed[i](cur, training)
                cur = self.enc_blocks[i](cur, training)
            else:
                cur = self.enc_blocks[i](cur, training)
            aliases = ("F3",) if i == 2 else ("F4",) if i == 3 else ()
            cur = _stage(f"enc{i + 1}", cur, aliases)
            skips.append(cur)
            if i < 3 and kinds[i + 1] == "dc":
                cur = ops.maxpool2(cur)

        cur = self.bottleneck_in(cur, training)
        cur = self.bottleneck(cur, training)
        cur = _stage("bottleneck", cur, ("F5",))

        for j, i in enumerate((3, 2, 1, 0)):
            up = self.dec_up[j](ops.upsample_bilinear2(cur), training)
            skip = skips[i]
            if self.cfg.stage_kinds[i] == "tok":
                cur = self.dec_blocks[j](ops.add(up, skip), training)
            else:
                gate = self.dec_fuse[j]
                gated = gate(skip, up, training) if gate is not None else skip
                cur = self.dec_blocks[j](ops.concat([up, gated], axis=1), training)
            cur = _stage(f"dec{i + 1}", cur)

        logits = self.head(cur, training)
        assert_stage_finite(logits, "head")
        if taps:
            return logits, captured
        return logits


def assert_stage_finite(t: Tensor, stage: str) -> None:
    try:
        assert_finite(t, f"stage {stage!r} output")
    except NumericError as e:
        raise NumericError(f"{e} (first non-finite stage: {stage})") from None


class UNetBaseline(blocks.Module):
    """Classic 4-down/4-up UNet with double 3x3 convs and the same IO
    contract as MSDCANet (divisible-by-16 inputs, single-channel logits).
    """

    kind = "unet"

    def __init__(self, channels=(16, 32, 64, 128, 256), in_channels: int = 1,
                 out_classes: int = 1, seed: int = 0):
        channels = tuple(int(c) for c in channels)
        if len(channels) != 5:
            raise ValueError(f"need 5 channel widths, got {channels}")
        self.channels = channels
        self.in_channels = int(in_channels)
        self.out_classes = int(out_classes)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        dtype = np.float32
        prev = in_channels
        self.enc = []
        for c in channels[:4]:
            self.enc.append(_Seq(_double_conv(prev, c, rng, dtype)))
            prev = c
        self.bottleneck = _Seq(_double_conv(channels[3], channels[4], rng, dtype))
        self.dec_up = []
        self.dec = []
        above = channels[4]
        for c in reversed(channels[:4]):
            self.dec_up.append(blocks.Conv2d(above, c, 3, rng, dtype, padding=1))
            self.dec.append(_Seq(_double_conv(2 * c, c, rng, dtype)))
            above = c
        self.head = blocks.Conv2d(channels[0], out_classes, 1, rng, dtype)

    def forward(self, x: Tensor, training: bool = False, taps=None):
        if x.data.ndim != 4:
            raise ValueError(f"input must be NCHW, got shape {tuple(x.shape)}")
        n, cin, h, w = x.shape
        if cin != self.in_channels:
            raise ValueError(f"model expects {self.in_channels} input channels, got {cin}")
        if h % 16 or w % 16:
            raise ValueError(f"input spatial extents must be divisible by 16, got {h}x{w}")
        captured: dict[str, Tensor] = {}
        taps = set(taps or ())
        skips = []
        cur = x
        for i, stage in enumerate(self.enc):
            cur = stage(cur, training)
            assert_stage_finite(cur, f"enc{i + 1}")
            if f"enc{i + 1}" in taps:
                captured[f"enc{i + 1}"] = cur
            skips.append(cur)
            cur = ops.maxpool2(cur)
        cur = self.bottleneck(cur, training)
        assert_stage_finite(cur, "bottleneck")
        if "bottleneck" in taps:
            captured["bottleneck"] = cur
        for j, skip in enumerate(reversed(skips)):
            up = self.dec_up[j](ops.upsample_bilinear2(cur), training)
            cur = self.dec[j](ops.concat([up, skip], axis=1), training)
            assert_stage_finite(cur, f"dec{4 - j}")
            if f"dec{4 - j}" in taps:
                captured[f"dec{4 - j}"] = cur
        logits = self.head(cur, training)
        assert_stage_finite(logits, "head")
        if taps:
            return logits, captured
        return logits

    def tap_names(self) -> tuple[str, ...]:
        return ("enc1", "enc2", "enc3", "enc4", "bottleneck", "dec4", "dec3", "dec2", "dec1")


def build_msdcanet(cfg: ModelConfig, seed: int = 0) -> MSDCANet:
    return MSDCANet(cfg, seed)


def build_unet_baseline(channels=(16, 32, 64, 128, 256), in_channels: int = 1,
                        out_classes: int = 1, seed: int = 0) -> UNetBaseline:
    return UNetBaseline(channels, in_channels, out_classes, seed)


# ---------------------------------------------------------------------------
# accounting


def count_params(model) -> dict:
    """Parameter count and serialized size at 4 bytes per weight."""
    count = sum(p.size for _, p in model.named_params()) if hasattr(model, "named_params") else 0
    return {"count": int(count), "megabytes": count * 4 / 2 ** 20}


def estimate_flops(model, input_shape) -> dict:
    """Forward-pass FLOPs for one batch of `input_shape` (N,C,H,W).

    Counts the documented per-operator costs (see msdcanet.ops): one
    multiply-accumulate is 2 FLOPs. Returns both the raw count and GFLOPs.
    """
    x = Tensor(np.zeros(tuple(int(s) for s in input_shape), dtype=np.float32))
    with count_flops() as counter:
        model.forward(x, training=False)
    return {"flops": counter.total, "gflops": counter.total / 1e9}


# ---------------------------------------------------------------------------
# checkpoint IO
#
# Binary layout (all little-endian):
#   magic "MSDC" | u32 version | u32 json_len | config JSON
#   u32 n_tensors | tensor records (params then buffers, traversal order)
#   u8 has_optimizer | [optimizer: u64 step, u32 n, tensor records]
#   i64 epoch | f64 best_metric (NaN when absent)
# tensor record: u16 name_len | name utf8 | u8 dtype (0=f32, 1=f64)
#   | u8 ndim | u32 dims... | raw little-endian payload

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _write_tensor(out, name: str, arr: np.ndarray) -> None:
    code = 0 if arr.dtype == np.float32 else 1
    encoded = name.encode("utf-8")
    out.write(struct.pack("<H", len(encoded)))
    out.write(encoded)
    out.write(struct.pack("<BB", code, arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.write(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointFormatError(f"truncated checkpoint: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_tensor(f) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(f, 2))
    name = _read_exact(f, name_len).decode("utf-8")
    code, ndim = struct.unpack("<BB", _read_exact(f, 2))
    if code not in _DTYPE_CODES:
        raise CheckpointFormatError(f"unknown dtype code {code} for tensor {name!r}")
    shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
    dtype = _DTYPE_CODES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    arr = np.frombuffer(_read_exact(f, nbytes), dtype=dtype).reshape(shape)
    return name, np.ascontiguousarray(arr)


def _model_meta(model) -> dict:
    if model.kind == "msdcanet":
        cfg = asdict(model.cfg)
        cfg["tok_mlp_stages"] = sorted(model.cfg.tok_mlp_stages)
        return {"kind": model.kind, "config": cfg, "seed": model.seed}
    return {"kind": model.kind, "channels": list(model.channels),
            "in_channels": model.in_channels, "out_classes": model.out_classes,
            "seed": model.seed}


def _model_from_meta(meta: dict):
    kind = meta.get("kind")
    if kind == "msdcanet":
        raw = dict(meta["config"])
        raw["channels"] = tuple(raw["channels"])
        raw["dilation_rates"] = tuple(raw["dilation_rates"])
        raw["shift_offsets"] = tuple(raw["shift_offsets"])
        raw["tok_mlp_stages"] = frozenset(raw["tok_mlp_stages"])
        return MSDCANet(ModelConfig(**raw), seed=meta.get("seed", 0))
    if kind == "unet":
        return UNetBaseline(meta["channels"], meta["in_channels"],
                            meta["out_classes"], meta.get("seed", 0))
    raise CheckpointFormatError(f"unknown model kind {kind!r}")


def _state_arrays(model) -> list[tuple[str, np.ndarray]]:
    rows = [(f"param.{name}", p.data) for name, p in model.named_params()]
    rows += [(f"buffer.{name}", b) for name, b in model.named_buffers()]
    return rows


def save_checkpoint(model, path, optimizer=None, epoch: int = 0,
                    best_metric: float | None = None) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    meta = json.dumps(_model_meta(model), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)

    rows = _state_arrays(model)
    buf.write(struct.pack("<I", len(rows)))
    for name, arr in rows:
        _write_tensor(buf, name, arr)

    if optimizer is not None:
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<Q", optimizer.step_count))
        opt_rows = optimizer.state_arrays()
        buf.write(struct.pack("<I", len(opt_rows)))
        for name, arr in opt_rows:
            _write_tensor(buf, name, arr)
    else:
        buf.write(struct.pack("<B", 0))

    buf.write(struct.pack("<q", int(epoch)))
    buf.write(struct.pack("<d", float("nan") if best_metric is None else float(best_metric)))
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path):
    """Returns (model, extras) where extras carries epoch / best_metric /
    optimizer_state; the rebuilt model's forward is bit-identical to the
    saved one's."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(f"bad magic {magic!r}; not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version} "
                                        f"(this build reads version {CHECKPOINT_VERSION})")
        (meta_len,) = struct.unpack("<I", _read_exact(f, 4))
        meta = json.loads(_read_exact(f, meta_len).decode("utf-8"))
        model = _model_from_meta(meta)

        (n_tensors,) = struct.unpack("<I", _read_exact(f, 4))
        table = dict(_read_tensor(f) for _ in range(n_tensors))
        expected = _state_arrays(model)
        if len(table) != len(expected):
            raise CheckpointFormatError(f"tensor table has {len(table)} entries, "
                                        f"model needs {len(expected)}")
        for name, arr in expected:
            if name not in table:
                raise CheckpointFormatError(f"checkpoint is missing tensor {name!r}")
            stored = table[name]
            if stored.shape != arr.shape:
                raise CheckpointFormatError(f"tensor {name!r} has shape {stored.shape}, "
                                            f"model expects {arr.shape}")
            arr[...] = stored.astype(arr.dtype)

        extras: dict = {"meta": meta}
        (has_opt,) = struct.unpack("<B", _read_exact(f, 1))
        if has_opt:
            (step,) = struct.unpack("<Q", _read_exact(f, 8))
            (n_opt,) = struct.unpack("<I", _read_exact(f, 4))
            extras["optimizer_state"] = {"step": step,
                                         "tensors": dict(_read_tensor(f) for _ in range(n_opt))}
        (epoch,) = struct.unpack("<q", _read_exact(f, 8))
        (best,) = struct.unpack("<d", _read_exact(f, 8))
        extras["epoch"] = epoch
        extras["best_metric"] = None if np.isnan(best) else best
    return model, extras
