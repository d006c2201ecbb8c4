"""Segmentation metrics and the paired significance-test protocol.

Confusion-derived rates (F1, MIoU, sensitivity, precision) over binary
masks, average surface distance, infected-area ratio, a paired t-test with
star grading, and batch evaluation of a model over a dataset producing a
CSV/JSON-serializable report.

Conventions: MIoU averages foreground and background IoU; a class with an
all-zero denominator scores 1.0 when both masks agree it is empty, else
0.0. Mask boundaries are foreground pixels 4-adjacent to background
(pixels beyond the image count as background), distances are Euclidean in
pixel units. Star grades: p<0.05 *, p<0.01 **, p<0.001 ***, else ns.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, stats

from . import ops
from .tensor import Tensor


class EmptyMaskError(ValueError):
    """Metric undefined on an empty mask (caller may skip the image)."""


def _as_binary(mask, name: str) -> np.ndarray:
    arr = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    arr = np.squeeze(arr)
    vals = np.unique(arr)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError(f"{name} must be binary (0/1), found values {vals[:8]}")
    return arr.astype(bool)


@dataclass
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred, gt) -> ConfusionMatrix:
    p = _as_binary(pred, "pred")
    g = _as_binary(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    return ConfusionMatrix(
        tp=int((p & g).sum()),
        fp=int((p & ~g).sum()),
        fn=int((~p & g).sum()),
        tn=int((~p & ~g).sum()),
    )


def _rate(num: int, den: int) -> float:
    # All-zero denominator: 1.0 iff there was nothing to find and nothing
    # was predicted (num == den == 0 happens only then), else 0.0.
    if den == 0:
        return 1.0
    return num / den


def precision(cm: ConfusionMatrix) -> float:
    return _rate(cm.tp, cm.tp + cm.fp)


def sensitivity(cm: ConfusionMatrix) -> float:
    return _rate(cm.tp, cm.tp + cm.fn)


def f1(cm: ConfusionMatrix) -> float:
    # 2PR/(P+R) == 2tp/(2tp+fp+fn); the count form is a single division,
    # so it is exactly the rounded rational value.
    denom = 2 * cm.tp + cm.fp + cm.fn
    if denom == 0:
        return 1.0
    return 2 * cm.tp / denom


def miou(cm: ConfusionMatrix) -> float:
    fg = 1.0 if cm.tp + cm.fp + cm.fn == 0 else cm.tp / (cm.tp + cm.fp + cm.fn)
    bg = 1.0 if cm.tn + cm.fp + cm.fn == 0 else cm.tn / (cm.tn + cm.fp + cm.fn)
    return 0.5 * (fg + bg)


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour (or image border) background."""
    m = mask.astype(bool)
    padded = np.pad(m, 1)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def asd(pred, gt) -> float:
    """Symmetric average surface distance between two nonempty masks."""
    p = _as_binary(pred, "pred")
    g = _as_binary(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    if not p.any() or not g.any():
        raise EmptyMaskError("average surface distance is undefined for an empty mask")
    bp = boundary_pixels(p)
    bg_ = boundary_pixels(g)
    # Exact Euclidean distance-to-boundary fields, sampled at the other
    # boundary; independent of the brute-force nearest-pair oracle used in
    # the tests.
    dist_to_g = ndimage.distance_transform_edt(~bg_)
    dist_to_p = ndimage.distance_transform_edt(~bp)
    return 0.5 * (float(dist_to_g[bp].mean()) + float(dist_to_p[bg_].mean()))


def infection_ratio(infection_mask, region_mask) -> float:
    inf = _as_binary(infection_mask, "infection_mask")
    reg = _as_binary(region_mask, "region_mask")
    if inf.shape != reg.shape:
        raise ValueError(f"shape mismatch: infection {inf.shape} vs region {reg.shape}")
    region = int(reg.sum())
    if region == 0:
        raise EmptyMaskError("infected-area ratio is undefined for an empty region mask")
    return int((inf & reg).sum()) / region


# ---------------------------------------------------------------------------
# paired t-test

_STAR_THRESHOLDS = ((0.001, "***"), (0.01, "**"), (0.05, "*"))


@dataclass
class TTestResult:
    t: float
    p: float
    n: int
    grade: str
    degenerate_variance: bool = False


def _star_grade(p: float) -> str:
    for threshold, stars in _STAR_THRESHOLDS:
        if p < threshold:
            return stars
    return "ns"


def paired_t_test(a, b) -> TTestResult:
    """Two-sided paired t-test on per-image score differences a[i] - b[i]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be equal-length 1-D, got {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError(f"paired t-test needs n >= 2 pairs, got {n}")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(t=0.0, p=1.0, n=n, grade="ns")
        return TTestResult(t=math.copysign(math.inf, mean), p=0.0, n=n,
                           grade="***", degenerate_variance=True)
    t = mean / (sd / math.sqrt(n))
    p = 2.0 * float(stats.t.sf(abs(t), df=n - 1))
    return TTestResult(t=float(t), p=p, n=n, grade=_star_grade(p))


# ---------------------------------------------------------------------------
# batch evaluation

_REPORT_COLUMNS = ("id", "f1", "miou", "sensitivity", "precision", "asd", "infection_ratio")


@dataclass
class ImageMetrics:
    id: str
    f1: float
    miou: float
    sensitivity: float
    precision: float
    asd: float | None = None
    infection_ratio: float | None = None
    flags: tuple[str, ...] = ()


@dataclass
class MetricsReport:
    records: list[ImageMetrics] = field(default_factory=list)

    @property
    def aggregates(self) -> dict:
        out = {}
        for key in ("f1", "miou", "sensitivity", "precision", "asd", "infection_ratio"):
            vals = [getattr(r, key) for r in self.records if getattr(r, key) is not None]
            out[key] = float(np.mean(vals)) if vals else None
        out["n"] = len(self.records)
        return out

    def column(self, key: str) -> list:
        return [getattr(r, key) for r in self.records]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(_REPORT_COLUMNS)
            for r in self.records:
                writer.writerow([
                    r.id, f"{r.f1:.6f}", f"{r.miou:.6f}", f"{r.sensitivity:.6f}",
                    f"{r.precision:.6f}",
                    "" if r.asd is None else f"{r.asd:.6f}",
                    "" if r.infection_ratio is None else f"{r.infection_ratio:.6f}",
                ])

    def to_json(self, path=None):
        payload = {
            "aggregates": self.aggregates,
            "flags": {r.id: list(r.flags) for r in self.records if r.flags},
        }
        if path is None:
            return json.dumps(payload, indent=2, sort_keys=True)
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
        return None


def predict_mask(model, image: Tensor, threshold: float = 0.5) -> np.ndarray:
    """Binary (H, W) prediction: sigmoid(logits) >= threshold."""
    x = Tensor(image.data[None] if image.data.ndim == 3 else image.data)
    logits = model.forward(x, training=False)
    prob = ops.sigmoid(logits).data[0, 0]
    return (prob >= threshold).astype(np.float32)


def evaluate_pair(sample_id: str, pred: np.ndarray, gt: np.ndarray,
                  region: np.ndarray | None = None) -> ImageMetrics:
    cm = confusion(pred, gt)
    flags = []
    try:
        surface = asd(pred, gt)
    except EmptyMaskError:
        surface = None
        flags.append("asd-undefined-empty-mask")
    ratio = None
    if region is not None:
        try:
            ratio = infection_ratio(pred, region)
        except EmptyMaskError:
            flags.append("infection-ratio-undefined-empty-region")
    return ImageMetrics(id=sample_id, f1=f1(cm), miou=miou(cm),
                        sensitivity=sensitivity(cm), precision=precision(cm),
                        asd=surface, infection_ratio=ratio, flags=tuple(flags))


def batch_evaluate(model, dataset, threshold: float = 0.5) -> MetricsReport:
    """Per-image metrics over a dataset, ordered by sample id.

    Per-image metric failures become flags on that record; the batch never
    aborts.
    """
    samples = sorted(dataset, key=lambda s: s.id)
    if not samples:
        raise ValueError("batch_evaluate needs a nonempty dataset")
    report = MetricsReport()
    for sample in samples:
        pred = predict_mask(model, sample.image, threshold)
        gt = sample.mask.data[0]
        region = sample.region_mask.data[0] if sample.region_mask is not None else None
        report.records.append(evaluate_pair(sample.id, pred, gt, region))
    return report
