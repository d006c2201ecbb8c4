"""Attention heatmaps, inference-speed benchmarking, ablation sweeps and
noise-robustness reports.

Heatmaps are gradient-weighted activation maps probed at a named stage
output; the target score for segmentation is the mean foreground logit.
Layer aliases F3/F4/F5 map to the stage-3 output, stage-4 output and
bottleneck output.
"""

from __future__ import annotations

import csv
import platform
import time
import zlib
from dataclasses import dataclass, replace

import numpy as np

from . import data as data_mod
from . import kernels, metrics, network, ops, trainer
from .ops import bilinear_matrix
from .tensor import Tape, Tensor


@dataclass
class HeatMap:
    layer_id: str
    values: np.ndarray        # feature-map resolution, in [0, 1]
    upsampled: np.ndarray     # input resolution, in [0, 1]
    all_zero: bool = False    # normalization skipped: map was identically 0


def grad_cam(model, image: Tensor, layer_id: str) -> HeatMap:
    """Gradient-weighted activation heatmap at one stage output.

    Channel weights are the spatial means of d(mean logit)/d(activation);
    the map is ReLU(sum_c w_c * A_c), min-max normalized (skipped and
    flagged when identically zero), then bilinearly upsampled to the input
    resolution.
    """
    if layer_id not in model.tap_names():
        raise ValueError(f"unknown layer {layer_id!r}; expected one of {model.tap_names()}")
    x = Tensor(image.data[None] if image.data.ndim == 3 else image.data)
    if x.shape[0] != 1:
        raise ValueError("grad_cam expects a single image")
    with Tape() as tape:
        logits, taps = model.forward(x, training=False, taps=[layer_id])
        score = ops.tensor_mean(logits)
    tape.backward(score)
    act = taps[layer_id]
    grads = act.grad
    if grads is None:
        grads = np.zeros_like(act.data)
    weights = grads.mean(axis=(2, 3), keepdims=True)
    cam = np.maximum((weights * act.data).sum(axis=1)[0], 0.0)
    peak = cam.max()
    all_zero = peak == 0.0
    if not all_zero:
        lo = cam.min()
        cam = (cam - lo) / (peak - lo) if peak > lo else np.ones_like(cam)
    h, w = x.shape[2], x.shape[3]
    ur = bilinear_matrix(cam.shape[0], h, np.float64)
    uc = bilinear_matrix(cam.shape[1], w, np.float64)
    up = np.clip(ur @ cam.astype(np.float64) @ uc.T, 0.0, 1.0)
    return HeatMap(layer_id=layer_id, values=cam.astype(np.float32),
                   upsampled=up.astype(np.float32), all_zero=all_zero)


def fps_benchmark(model, input_shape, n_iters: int = 50, warmup: int = 5) -> dict:
    """Wall-clock forward-only inference timing.

    Reports per-batch mean/std milliseconds and FPS = 1000/mean_ms, plus an
    environment descriptor; absolute numbers are machine-specific and not
    comparable across hardware.
    """
    if n_iters < 10:
        raise ValueError(f"n_iters must be >= 10, got {n_iters}")
    x = Tensor(np.random.default_rng(0).random(tuple(input_shape), dtype=np.float32))
    for _ in range(warmup):
        model.forward(x, training=False)
    times = []
    for _ in range(n_iters):
        t0 = time.perf_counter()
        model.forward(x, training=False)
        times.append((time.perf_counter() - t0) * 1000.0)
    times = np.asarray(times)
    mean_ms = float(times.mean())
    return {
        "fps": 1000.0 / mean_ms,
        "mean_ms": mean_ms,
        "std_ms": float(times.std()),
        "n_iters": n_iters,
        "input_shape": tuple(int(s) for s in input_shape),
        "environment": {
            "platform": platform.platform(),
            "python": platform.python_version(),
            "numpy": np.__version__,
            "kernel_backend": kernels.BACKEND,
        },
        "comparable_across_hardware": False,
    }


# ---------------------------------------------------------------------------
# ablation sweeps

RATE_GRID = ((2, 4, 8, 12), (4, 8, 16, 24), (6, 12, 18, 24))
PLACEMENT_GRID = (frozenset({4}), frozenset({3, 4}), frozenset({2, 3, 4}))
CHANNEL_GRID = ("S", "M", "L")
MODULE_GRID = (
    "baseline-unet",
    "tok-mlp",
    "tok-mlp+res-aspp",
    "tok-mlp+dc",
    "tok-mlp+dc+res-aspp",
    "tok-mlp+dc+res-aspp+ag",
)


def _module_variant(base: network.ModelConfig, label: str, seed: int):
    if label == "baseline-unet":
        return network.build_unet_baseline(base.channels, base.in_channels,
                                           base.out_classes, seed=seed)
    toggles = {
        "tok-mlp": dict(dc_blocks=False, res_aspp=False, attention_gates=False),
        "tok-mlp+res-aspp": dict(dc_blocks=False, res_aspp=True, attention_gates=False),
        "tok-mlp+dc": dict(dc_blocks=True, res_aspp=False, attention_gates=False),
        "tok-mlp+dc+res-aspp": dict(dc_blocks=True, res_aspp=True, attention_gates=False),
        "tok-mlp+dc+res-aspp+ag": dict(dc_blocks=True, res_aspp=True, attention_gates=True),
    }[label]
    return network.build_msdcanet(replace(base, variant="custom", **toggles), seed=seed)


def sweep_variants(base_cfg: network.ModelConfig, axis: str, seed: int):
    """(label, model) pairs for one ablation axis."""
    if axis == "modules":
        return [(label, _module_variant(base_cfg, label, seed)) for label in MODULE_GRID]
    if axis == "rates":
        return [("r" + "-".join(map(str, rates)),
                 network.build_msdcanet(replace(base_cfg, dilation_rates=rates), seed=seed))
                for rates in RATE_GRID]
    if axis == "placement":
        return [("tok@" + "".join(str(s) for s in sorted(stages, reverse=True)),
                 network.build_msdcanet(replace(base_cfg, tok_mlp_stages=stages), seed=seed))
                for stages in PLACEMENT_GRID]
    if axis == "channels":
        return [(f"variant-{v}",
                 network.build_msdcanet(replace(base_cfg, variant=v,
                                                channels=network.VARIANT_CHANNELS[v]), seed=seed))
                for v in CHANNEL_GRID]
    raise ValueError(f"unknown ablation axis {axis!r}; "
                     "expected modules|rates|placement|channels")


def ablation_sweep(base_cfg: network.ModelConfig, axis: str, train_ds, val_ds,
                   train_cfg: trainer.TrainConfig, log=None) -> list[dict]:
    """Train each variant on one axis identically (shared seed) and report
    params/GFLOPs/F1/MIoU per row."""
    sample = train_ds[0]
    input_shape = (1, *sample.image.shape)
    rows = []
    for label, model in sweep_variants(base_cfg, axis, train_cfg.seed):
        result = trainer.train(model, train_ds, val_ds, replace(train_cfg, checkpoint_dir=None))
        report = metrics.batch_evaluate(model, val_ds)
        agg = report.aggregates
        counts = network.count_params(model)
        flops = network.estimate_flops(model, input_shape)
        row = {
            "axis": axis,
            "label": label,
            "params": counts["count"],
            "params_mb": counts["megabytes"],
            "gflops": flops["gflops"],
            "f1": agg["f1"],
            "miou": agg["miou"],
            "best_epoch": result.best_epoch,
        }
        rows.append(row)
        if log is not None:
            log(row)
    return rows


def write_sweep_csv(rows: list[dict], path) -> None:
    cols = ["axis", "label", "params", "params_mb", "gflops", "f1", "miou", "best_epoch"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=cols)
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# noise robustness


def parse_noise_spec(text: str) -> list[tuple[str, float]]:
    """Parse 'none:0,gaussian:0.05,poisson:30' into (kind, level) pairs."""
    specs = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        kind, _, level = part.partition(":")
        kind = kind.strip().lower()
        if kind not in ("none", "gaussian", "poisson"):
            raise ValueError(f"unknown noise kind {kind!r}; expected none|gaussian|poisson")
        specs.append((kind, float(level) if level else 0.0))
    if not specs:
        raise ValueError("empty noise spec")
    return specs


def _noisy_sample(sample, kind: str, level: float, noise_seed: int):
    if kind == "none" or (kind == "gaussian" and level == 0.0):
        return sample
    seq = np.random.SeedSequence(entropy=int(noise_seed),
                                 spawn_key=(zlib.crc32(f"{kind}:{level}:{sample.id}".encode()),))
    seed = int(seq.generate_state(1)[0])
    if kind == "gaussian":
        image = data_mod.add_gaussian_noise(sample.image, level, seed)
    else:
        image = data_mod.add_poisson_noise(sample.image, level, seed)
    return data_mod.Sample(id=sample.id, image=image, mask=sample.mask,
                           region_mask=sample.region_mask)


def noise_robustness(model, dataset, specs, noise_seed: int = 0,
                     threshold: float = 0.5) -> list[dict]:
    """Evaluate the model under each (kind, level) noise spec.

    Noise goes on the test images only (masks untouched) and is
    deterministic per (noise_seed, spec, sample id). Each row carries the
    aggregate F1 / MIoU / sensitivity / precision / ASD.
    """
    rows = []
    for kind, level in specs:
        noisy = data_mod.Dataset(
            [_noisy_sample(s, kind, level, noise_seed) for s in dataset],
            split=dataset.split, source=dataset.source)
        report = metrics.batch_evaluate(model, noisy, threshold)
        agg = report.aggregates
        rows.append({
            "kind": kind,
            "level": level,
            "f1": agg["f1"],
            "miou": agg["miou"],
            "sensitivity": agg["sensitivity"],
            "precision": agg["precision"],
            "asd": agg["asd"],
        })
    return rows


def write_robustness_csv(rows: list[dict], path) -> None:
    cols = ["kind", "level", "f1", "miou", "sensitivity", "precision", "asd"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=cols)
        writer.writeheader()
        writer.writerows(rows)
