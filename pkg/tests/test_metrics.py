"""Metric correctness against hand arithmetic and brute-force counting."""

import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msdcanet import metrics
from msdcanet.metrics import (ConfusionMatrix, EmptyMaskError, MetricsReport,
                              asd, boundary_pixels, confusion, evaluate_pair, f1,
                              infection_ratio, miou, paired_t_test, precision,
                              sensitivity)

from oracles import asd_bruteforce, counting_oracle, miou_oracle


def _mask(bits):
    return np.asarray(bits, dtype=np.float64)


# ---------------------------------------------------------------------------
# confusion and rates


def test_confusion_all_ones():
    cm = confusion(_mask([[1, 1], [1, 1]]), _mask([[1, 1], [1, 1]]))
    assert (cm.tp, cm.fp, cm.fn, cm.tn) == (4, 0, 0, 0)


def test_confusion_hand_count():
    cm = confusion(_mask([1, 1, 0, 0]), _mask([1, 0, 1, 0]))
    assert (cm.tp, cm.fp, cm.fn, cm.tn) == (1, 1, 1, 1)


def test_confusion_complement_has_no_agreement():
    gt = _mask([1, 0, 1, 1, 0])
    cm = confusion(1 - gt, gt)
    assert cm.tp == 0 and cm.tn == 0


def test_confusion_rejects_nonbinary_and_mismatch():
    with pytest.raises(ValueError):
        confusion(_mask([0.5, 1]), _mask([1, 1]))
    with pytest.raises(ValueError):
        confusion(_mask([1, 1]), _mask([[1], [1], [1]]))


def test_rates_hand_arithmetic():
    cm = ConfusionMatrix(tp=1, fp=1, fn=1, tn=0)
    assert precision(cm) == 0.5
    assert sensitivity(cm) == 0.5
    assert f1(cm) == 0.5


def test_rates_perfect_prediction():
    cm = ConfusionMatrix(tp=7, fp=0, fn=0, tn=3)
    assert precision(cm) == sensitivity(cm) == f1(cm) == miou(cm) == 1.0


def test_empty_pred_vs_nonempty_gt():
    cm = confusion(_mask([0, 0, 0]), _mask([1, 1, 0]))
    assert sensitivity(cm) == 0.0
    assert f1(cm) == 0.0


def test_both_empty_convention_scores_one():
    cm = confusion(_mask([0, 0]), _mask([0, 0]))
    assert f1(cm) == 1.0 and precision(cm) == 1.0 and sensitivity(cm) == 1.0
    assert miou(cm) == 1.0


def test_miou_hand_case():
    assert miou(ConfusionMatrix(1, 1, 1, 1)) == pytest.approx(1 / 3)


def test_confusion_metrics_match_counting_oracle_on_1000_masks():
    rng = np.random.default_rng(99)
    for _ in range(1000):
        pred = rng.integers(0, 2, (8, 8)).astype(np.float64)
        gt = rng.integers(0, 2, (8, 8)).astype(np.float64)
        cm = confusion(pred, gt)
        tp, fp, fn, tn = counting_oracle(pred, gt)
        assert (cm.tp, cm.fp, cm.fn, cm.tn) == (tp, fp, fn, tn)
        assert miou(cm) == pytest.approx(miou_oracle(pred.astype(bool), gt.astype(bool)),
                                         abs=1e-12)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_miou_f1_invariant_under_transposition(seed):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, 2, (6, 9)).astype(np.float64)
    gt = rng.integers(0, 2, (6, 9)).astype(np.float64)
    a = confusion(pred, gt)
    b = confusion(pred.T, gt.T)
    assert miou(a) == miou(b)
    assert f1(a) == f1(b)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_dice_is_at_least_foreground_iou(seed):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, 2, (8, 8)).astype(np.float64)
    gt = rng.integers(0, 2, (8, 8)).astype(np.float64)
    cm = confusion(pred, gt)
    fg_iou = 1.0 if cm.tp + cm.fp + cm.fn == 0 else cm.tp / (cm.tp + cm.fp + cm.fn)
    assert f1(cm) >= fg_iou - 1e-12


# ---------------------------------------------------------------------------
# surface distance


def test_asd_identical_masks_is_zero():
    m = np.zeros((8, 8))
    m[2:5, 3:6] = 1
    assert asd(m, m) == 0.0


def test_asd_single_pixels_three_columns_apart():
    a = np.zeros((5, 7))
    a[2, 1] = 1
    b = np.zeros((5, 7))
    b[2, 4] = 1
    assert asd(a, b) == 3.0


def test_asd_symmetry_and_empty_error():
    rng = np.random.default_rng(5)
    a = (rng.random((10, 10)) > 0.6).astype(float)
    a[0, 0] = 1
    b = (rng.random((10, 10)) > 0.6).astype(float)
    b[5, 5] = 1
    assert asd(a, b) == asd(b, a)
    with pytest.raises(EmptyMaskError):
        asd(np.zeros((4, 4)), b[:4, :4])


def test_asd_matches_bruteforce_on_100_random_pairs():
    rng = np.random.default_rng(17)
    done = 0
    while done < 100:
        a = (rng.random((16, 16)) > 0.8).astype(float)
        b = (rng.random((16, 16)) > 0.8).astype(float)
        if not a.any() or not b.any():
            continue
        assert asd(a, b) == pytest.approx(asd_bruteforce(a, b), abs=1e-9)
        done += 1


def test_boundary_uses_4_connectivity_and_border():
    m = np.zeros((5, 5))
    m[1:4, 1:4] = 1
    b = boundary_pixels(m)
    assert b.sum() == 8                       # ring; center pixel is interior
    assert not b[2, 2]
    full = np.ones((3, 3))
    bf = boundary_pixels(full)                # image border counts as background
    assert bf.sum() == 8 and not bf[1, 1]


# ---------------------------------------------------------------------------
# infection ratio


def test_infection_ratio_cases():
    region = np.ones((3, 4))
    assert infection_ratio(region, region) == 1.0
    assert infection_ratio(np.zeros((3, 4)), region) == 0.0
    inf = np.zeros((3, 4))
    inf[0, :3] = 1
    assert infection_ratio(inf, region) == 0.25
    with pytest.raises(EmptyMaskError):
        infection_ratio(inf, np.zeros((3, 4)))


# ---------------------------------------------------------------------------
# paired t-test


def test_t_test_identical_inputs():
    r = paired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert r.t == 0.0 and r.p == 1.0 and r.grade == "ns"


def test_t_test_hand_derived_case():
    # differences [1..5]: t = 3/(1.5811/sqrt(5)); p from Student-t, 4 dof
    r = paired_t_test([1.0, 2.0, 3.0, 4.0, 5.0], [0.0] * 5)
    assert r.t == pytest.approx(4.2426, abs=1e-4)
    assert r.p == pytest.approx(0.0132, abs=1e-3)
    assert r.grade == "*"
    assert r.n == 5


def test_t_test_scale_invariance_of_grade():
    a = [0.91, 0.83, 0.77, 0.95, 0.88, 0.71]
    b = [0.80, 0.79, 0.70, 0.88, 0.80, 0.69]
    base = paired_t_test(a, b)
    scaled = paired_t_test([2 * v for v in a], [2 * v for v in b])
    shifted = paired_t_test([v + 3 for v in a], [v + 3 for v in b])
    assert base.grade == scaled.grade == shifted.grade
    assert base.t == pytest.approx(scaled.t, rel=1e-12)


def test_t_test_degenerate_variance():
    r = paired_t_test([1.0, 2.0, 3.0], [0.0, 1.0, 2.0])   # constant difference 1
    assert r.degenerate_variance and r.p == 0.0 and np.isinf(r.t)
    with pytest.raises(ValueError):
        paired_t_test([1.0], [2.0])


def test_t_test_star_thresholds():
    assert metrics._star_grade(0.2) == "ns"
    assert metrics._star_grade(0.04) == "*"
    assert metrics._star_grade(0.009) == "**"
    assert metrics._star_grade(0.0009) == "***"


# ---------------------------------------------------------------------------
# batch evaluation and report serialization


class _OracleModel:
    """Emits +/-50 logits exactly reproducing each sample's mask."""

    def __init__(self, dataset):
        self.lookup = {tuple(np.round(s.image.data.reshape(-1), 6)): s.mask.data
                       for s in dataset}

    def forward(self, x, training=False):
        from msdcanet.tensor import Tensor
        key = tuple(np.round(x.data[0].reshape(-1), 6))
        mask = self.lookup[key]
        return Tensor((mask[None] * 100.0 - 50.0).astype(np.float32))


class _ConstantModel:
    def __init__(self, logit):
        self.logit = logit

    def forward(self, x, training=False):
        from msdcanet.tensor import Tensor
        return Tensor(np.full((x.shape[0], 1, *x.shape[2:]), self.logit, dtype=np.float32))


def _tiny_dataset(n=6, size=16, seed=3):
    from msdcanet import data
    return data.synth_blobs(n, size, seed)


def test_batch_evaluate_oracle_model_scores_one():
    ds = _tiny_dataset()
    report = metrics.batch_evaluate(_OracleModel(ds), ds)
    agg = report.aggregates
    assert agg["f1"] == 1.0 and agg["miou"] == 1.0 and agg["asd"] == 0.0


def test_batch_evaluate_constant_zero_model():
    ds = _tiny_dataset()
    report = metrics.batch_evaluate(_ConstantModel(-50.0), ds)
    agg = report.aggregates
    assert agg["sensitivity"] == 0.0
    assert agg["asd"] is None     # every prediction empty -> flagged, skipped
    assert all("asd-undefined-empty-mask" in r.flags for r in report.records)


def test_batch_evaluate_aggregate_equals_mean_of_recomputed_per_image():
    ds = _tiny_dataset(n=5)
    model = _ConstantModel(0.4)
    report = metrics.batch_evaluate(model, ds, threshold=0.5)
    recomputed = []
    for s in sorted(ds, key=lambda s: s.id):
        pred = metrics.predict_mask(model, s.image, 0.5)
        recomputed.append(miou(confusion(pred, s.mask.data[0])))
    assert report.aggregates["miou"] == pytest.approx(float(np.mean(recomputed)), abs=1e-15)
    assert report.column("miou") == recomputed


def test_report_csv_and_json_round_trip(tmp_path):
    rec = evaluate_pair("img1", _mask([[1, 0], [0, 0]]), _mask([[1, 0], [0, 1]]))
    report = MetricsReport(records=[rec])
    csv_path = tmp_path / "m.csv"
    report.to_csv(csv_path)
    with open(csv_path) as fh:
        rows = list(csv.DictReader(fh))
    assert rows[0]["id"] == "img1"
    assert float(rows[0]["f1"]) == pytest.approx(rec.f1)
    payload = json.loads(report.to_json())
    assert payload["aggregates"]["n"] == 1
    assert payload["aggregates"]["miou"] == pytest.approx(rec.miou)
