"""Loss, Adam optimizer and the training/validation loop.

The loss is a weighted BCE + soft-Dice on logits (the standard pairing for
binary segmentation), implemented as one fused differentiable operator with
the numerically stable log1p(exp(-|z|)) BCE form. Training is plain Adam at
a constant learning rate: no schedule, weight decay or clipping. Runs are
bit-reproducible for a fixed seed in serial mode; all shuffling derives
from (seed, epoch).
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics, network
from .tensor import NumericError, Tensor, accumulate_grad, recording_tape


class TrainingDivergedError(NumericError):
    """Loss went non-finite; carries the offending epoch and batch."""

    def __init__(self, epoch: int, batch: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 4
    epochs: int = 40
    seed: int = 0
    bce_weight: float = 0.5
    dice_weight: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_dir: str | None = None
    val_every: int = 1
    early_stop_miou: float | None = None

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 1 or self.val_every < 1:
            raise ValueError("batch_size, epochs and val_every must be >= 1")
        if self.bce_weight < 0 or self.dice_weight < 0 or (self.bce_weight + self.dice_weight) == 0:
            raise ValueError("loss weights must be >= 0 and not both zero")
        return self


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_dice_loss(logits: Tensor, target: Tensor, weights=(0.5, 0.5)) -> Tensor:
    """w_bce * mean BCE(sigmoid(z), t)  +  w_dice * (1 - (2*sum(p*t)+1)/(sum(p)+sum(t)+1)).

    One fused op: the BCE term uses max(z,0) - z*t + log1p(exp(-|z|)) so it
    is exact in saturation, and the gradient is (sigmoid(z) - t)/n for the
    BCE part plus the chain through p = sigmoid(z) for the Dice part.
    """
    if logits.shape != target.shape:
        raise ValueError(f"logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    tvals = np.unique(target.data)
    if not np.isin(tvals, (0, 1)).all():
        raise ValueError(f"target must be binary (0/1), found values {tvals[:8]}")
    w_bce, w_dice = float(weights[0]), float(weights[1])
    z = logits.data
    t = target.data
    n = z.size

    bce = float((np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))).mean())
    p = _sigmoid(z)
    sum_pt = float((p * t).sum())
    sum_p = float(p.sum())
    sum_t = float(t.sum())
    dice = (2.0 * sum_pt + 1.0) / (sum_p + sum_t + 1.0)
    value = np.asarray(w_bce * bce + w_dice * (1.0 - dice), dtype=z.dtype)

    tape = recording_tape(logits)
    out = Tensor(value, requires_grad=tape is not None)
    if tape is not None:
        def bwd(gy):
            g = float(gy)
            gz = (w_bce / n) * (p - t)
            # d(1-dice)/dp_i = (dice - 2*t_i) / (sum_p + sum_t + 1), then p' = p(1-p)
            denom = sum_p + sum_t + 1.0
            gz = gz + w_dice * ((dice - 2.0 * t) / denom) * p * (1.0 - p)
            accumulate_grad(logits, (g * gz).astype(z.dtype))
        tape.record(out, bwd)
    return out


class Adam:
    """Bias-corrected Adam over a model's named parameters."""

    def __init__(self, named_params, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named = list(named_params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named}

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.named:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if p.grad is not None and p.grad.shape != p.data.shape:
                raise ValueError(f"gradient shape {p.grad.shape} mismatches parameter "
                                 f"{name} shape {p.data.shape}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grads(self) -> None:
        for _, p in self.named:
            p.zero_grad()

    def state_arrays(self):
        rows = [(f"m.{name}", arr) for name, arr in self.m.items()]
        rows += [(f"v.{name}", arr) for name, arr in self.v.items()]
        return rows


def adam_step(model, optimizer: Adam) -> None:
    """One optimizer step from the gradients currently on the model."""
    optimizer.step()
    optimizer.zero_grads()


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_miou: float | None = None
    val_f1: float | None = None


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "train_loss", "val_miou", "val_f1"])
            for r in self.records:
                writer.writerow([r.epoch, f"{r.train_loss:.8f}",
                                 "" if r.val_miou is None else f"{r.val_miou:.8f}",
                                 "" if r.val_f1 is None else f"{r.val_f1:.8f}"])


@dataclass
class TrainResult:
    history: History
    best_epoch: int
    best_miou: float
    best_checkpoint: str | None
    steps: int
    seconds: float


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def train(model, train_ds, val_ds, cfg: TrainConfig, log=None) -> TrainResult:
    """Seeded mini-batch loop: forward -> loss -> backward -> Adam step,
    validating MIoU each `val_every` epochs and retaining the best-MIoU
    checkpoint (written to cfg.checkpoint_dir when set)."""
    from .tensor import Tape

    cfg.validate()
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("train and validation datasets must be nonempty")
    optimizer = Adam(list(model.named_params()), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    images = np.stack([s.image.data for s in train_ds])
    masks = np.stack([s.mask.data for s in train_ds])
    weights = (cfg.bce_weight, cfg.dice_weight)

    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    best_path = str(ckpt_dir / "best.ckpt") if ckpt_dir is not None else None

    history = History()
    best_miou = -1.0
    best_epoch = -1
    steps = 0
    started = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(epoch,)))
        losses = []
        for batch_no, idx in enumerate(_batches(len(train_ds), cfg.batch_size, rng)):
            xb = Tensor(images[idx])
            yb = Tensor(masks[idx])
            tape = Tape()
            with tape:
                logits = model.forward(xb, training=True)
                loss = bce_dice_loss(logits, yb, weights)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainingDivergedError(epoch, batch_no)
            tape.backward(loss)
            adam_step(model, optimizer)
            losses.append(loss_val)
            steps += 1

        record = EpochRecord(epoch=epoch, train_loss=float(np.mean(losses)))
        if epoch % cfg.val_every == 0 or epoch == cfg.epochs:
            report = metrics.batch_evaluate(model, val_ds)
            agg = report.aggregates
            record.val_miou = agg["miou"]
            record.val_f1 = agg["f1"]
            if record.val_miou > best_miou:
                best_miou = record.val_miou
                best_epoch = epoch
                if best_path is not None:
                    network.save_checkpoint(model, best_path, optimizer=optimizer,
                                            epoch=epoch, best_metric=best_miou)
        history.records.append(record)
        if log is not None:
            log(record)
        if cfg.early_stop_miou is not None and best_miou >= cfg.early_stop_miou:
            break

    if ckpt_dir is not None:
        history.to_csv(ckpt_dir / "history.csv")
    return TrainResult(history=history, best_epoch=best_epoch, best_miou=best_miou,
                       best_checkpoint=best_path, steps=steps,
                       seconds=time.perf_counter() - started)
