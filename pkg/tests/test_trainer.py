"""Loss hand values, Adam behavior, and the training loop's contracts."""

import math

import numpy as np
import pytest

from msdcanet import data, network, ops, trainer
from msdcanet.gradcheck import finite_diff_check
from msdcanet.network import load_checkpoint
from msdcanet.tensor import Tensor
from msdcanet.trainer import (Adam, TrainConfig, TrainingDivergedError,
                              bce_dice_loss, train)


def _t(arr, grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------------------
# loss


def test_loss_saturated_logits_near_zero():
    target = np.array([[[[1.0, 0.0], [0.0, 1.0]]]])
    logits = np.where(target > 0, 50.0, -50.0)
    loss = bce_dice_loss(_t(logits), _t(target))
    assert loss.item() < 1e-3


def test_loss_bce_term_is_ln2_at_zero_logits():
    target = np.array([[[[1.0, 0.0], [1.0, 0.0]]]])
    loss = bce_dice_loss(_t(np.zeros((1, 1, 2, 2))), _t(target), weights=(1.0, 0.0))
    assert loss.item() == pytest.approx(math.log(2), rel=1e-12)


def test_loss_dice_term_value_by_hand():
    # p = 1 everywhere (huge logits), t has 2 of 4 set:
    # dice = (2*2+1)/(4+2+1) = 5/7
    target = np.array([[[[1.0, 1.0], [0.0, 0.0]]]])
    loss = bce_dice_loss(_t(np.full((1, 1, 2, 2), 500.0)), _t(target), weights=(0.0, 1.0))
    assert loss.item() == pytest.approx(1 - 5 / 7, abs=1e-9)


def test_loss_rejects_nonbinary_target_and_mismatch():
    with pytest.raises(ValueError):
        bce_dice_loss(_t(np.zeros((1, 1, 2, 2))), _t(np.full((1, 1, 2, 2), 0.5)))
    with pytest.raises(ValueError):
        bce_dice_loss(_t(np.zeros((1, 1, 2, 2))), _t(np.zeros((1, 1, 2, 4))))


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    target = Tensor((rng.random((1, 1, 4, 4)) > 0.5).astype(np.float64))
    for weights in [(0.5, 0.5), (1.0, 0.0), (0.0, 1.0), (0.3, 1.7)]:
        logits = Tensor(rng.standard_normal((1, 1, 4, 4)), requires_grad=True)
        report = finite_diff_check(
            lambda z, w=weights: bce_dice_loss(z, target, w), [logits])
        assert report["max_rel_err"] < 1e-4, (weights, report)


# ---------------------------------------------------------------------------
# Adam


def _params(values):
    return [(f"p{i}", Tensor(np.asarray(v, dtype=np.float64), requires_grad=True))
            for i, v in enumerate(values)]


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    named = _params([[1.0, -2.0]])
    opt = Adam(named, lr=0.1)
    p = named[0][1]
    p.grad = np.zeros(2)
    before = p.data.copy()
    opt.step()
    assert np.array_equal(p.data, before)
    assert np.array_equal(opt.m["p0"], np.zeros(2))


def test_adam_first_step_is_lr_times_sign():
    named = _params([[1.0, -1.0, 2.0]])
    opt = Adam(named, lr=0.05)
    p = named[0][1]
    p.grad = np.array([0.3, -0.7, 2.5])
    before = p.data.copy()
    opt.step()
    step = before - p.data
    np.testing.assert_allclose(step, 0.05 * np.sign(p.grad), rtol=1e-6)


def test_adam_lr_zero_never_moves_params():
    named = _params([[3.0, 4.0]])
    opt = Adam(named, lr=1e-300)
    p = named[0][1]
    for _ in range(5):
        p.grad = np.random.default_rng(0).standard_normal(2)
        before = p.data.copy()
        opt.step()
        np.testing.assert_allclose(p.data, before, atol=1e-290)


def test_adam_minimizes_a_quadratic():
    named = _params([[1.0]])
    opt = Adam(named, lr=0.05)
    p = named[0][1]
    for _ in range(100):
        p.grad = 2.0 * p.data      # d/dx x^2
        opt.step()
    assert abs(p.data[0]) < 0.1


def test_adam_step_counter_and_shape_check():
    named = _params([[1.0, 2.0]])
    opt = Adam(named)
    named[0][1].grad = np.zeros(2)
    opt.step()
    assert opt.step_count == 1
    named[0][1].grad = np.zeros(3)
    with pytest.raises(ValueError):
        opt.step()


# ---------------------------------------------------------------------------
# training loop


def _tiny_sets(n=12, size=32, seed=4):
    full = data.synth_blobs(n, size, seed)
    return full.split_at(n - 4)


def test_one_epoch_with_batch_4_over_8_samples_is_2_steps():
    train_ds, val_ds = _tiny_sets(n=12)
    model = network.build_msdcanet(network.ModelConfig(channels=(8, 8, 8, 8, 8)), seed=0)
    res = train(model, data.Dataset(train_ds.samples[:8]), val_ds,
                TrainConfig(epochs=1, batch_size=4, seed=0))
    assert res.steps == 2
    assert len(res.history.records) == 1


def test_training_is_bit_reproducible_in_serial_mode():
    train_ds, val_ds = _tiny_sets()

    def run():
        model = network.build_msdcanet(network.ModelConfig(channels=(8, 8, 8, 8, 8)), seed=3)
        res = train(model, train_ds, val_ds, TrainConfig(epochs=3, batch_size=4, seed=3))
        return ([r.train_loss for r in res.history.records],
                [r.val_miou for r in res.history.records])

    assert run() == run()


def test_training_loss_decreases_and_best_checkpoint_reproduces_miou(tmp_path):
    train_ds, val_ds = _tiny_sets(n=20, seed=6)
    model = network.build_msdcanet(network.variant_config("S"), seed=1)
    cfg = TrainConfig(epochs=5, batch_size=4, seed=1, checkpoint_dir=str(tmp_path))
    res = train(model, train_ds, val_ds, cfg)
    losses = [r.train_loss for r in res.history.records]
    assert losses[-1] < losses[0]
    assert (tmp_path / "history.csv").exists()

    best, extras = load_checkpoint(res.best_checkpoint)
    from msdcanet import metrics
    report = metrics.batch_evaluate(best, val_ds)
    assert report.aggregates["miou"] == pytest.approx(res.best_miou, abs=0)
    assert extras["best_metric"] == pytest.approx(res.best_miou, abs=0)
    assert "optimizer_state" in extras


def test_nan_loss_aborts_with_location():
    train_ds, val_ds = _tiny_sets()
    model = network.build_msdcanet(network.ModelConfig(channels=(8, 8, 8, 8, 8)), seed=0)
    model.head.w.data[...] = np.float32(1e38)   # overflow in float32 forward
    with np.errstate(over="ignore"), pytest.raises((TrainingDivergedError, Exception)) as exc_info:
        train(model, train_ds, val_ds, TrainConfig(epochs=1, batch_size=4, seed=0))
    assert "epoch" in str(exc_info.value) or "stage" in str(exc_info.value)


def test_train_rejects_empty_dataset_and_bad_config():
    train_ds, val_ds = _tiny_sets()
    model = network.build_msdcanet(network.ModelConfig(channels=(8, 8, 8, 8, 8)), seed=0)
    with pytest.raises(ValueError):
        train(model, data.Dataset([]), val_ds, TrainConfig())
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0).validate()
    with pytest.raises(ValueError):
        TrainConfig(bce_weight=0.0, dice_weight=0.0).validate()
