"""SGD training loop with staircase LR decay, curve logging and checkpoints.

The learning rate decays as initial_lr * gamma^floor(epoch / step_size).
Every epoch logs train/validation loss, pixel accuracy and validation
Dice; checkpoints are written every ``checkpoint_every`` epochs and the
best-validation-Dice checkpoint is always retained. Training is a pure
function of (model seed, data, TrainConfig.seed).
"""

import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dataset import batch_iterator
from .errors import ConfigError, InputError, TrainingDivergence
from .losses import LOSSES
from .network import save_checkpoint


@dataclass
class TrainConfig:
    initial_lr: float = 0.001
    gamma: float = 0.5
    step_size: int = 4
    momentum: float = 0.0
    batch_size: int = 8
    epochs: int = 20
    loss: str = "wbce"
    seed: int = 0
    checkpoint_every: int = 5

    def __post_init__(self):
        if self.initial_lr <= 0 or self.step_size < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("initial_lr, step_size, batch_size and epochs must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}, expected one of {sorted(LOSSES)}")
        if self.momentum < 0:
            raise ConfigError("momentum must be >= 0")


def lr_at_epoch(config, epoch):
    """Staircase decay: initial_lr * gamma^floor(epoch / step_size)."""
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    return config.initial_lr * config.gamma ** (epoch // config.step_size)


class SGD:
    """Plain SGD with optional momentum: v <- g + momentum*v; p <- p - lr*v."""

    def __init__(self, params, momentum=0.0):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    def step(self, lr, context=""):
        for name, p in self.params:
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise TrainingDivergence(f"non-finite gradient in {name} {context}".strip())
            v = p.grad + self.momentum * self.velocity[name]
            self.velocity[name] = v
            p.data = p.data - lr * v


def pixel_accuracy(pred, target, threshold=0.5):
    """Fraction of pixels whose thresholded prediction (>= is foreground) matches."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise InputError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean((pred >= threshold) == (target > 0.5)))


def dice_2d(pred_mask, gt_mask):
    """Per-sample overlap used for curve logging; both-empty scores 1."""
    na = int(pred_mask.sum())
    nb = int(gt_mask.sum())
    if na + nb == 0:
        return 1.0
    inter = int(np.count_nonzero(pred_mask & gt_mask))
    return 2.0 * inter / (na + nb)


CURVE_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc", "val_dice")


class CurveLog:
    def __init__(self, rows=None):
        self.rows = list(rows) if rows else []

    def append(self, **kw):
        self.rows.append(tuple(kw[c] for c in CURVE_COLUMNS))

    def column(self, name):
        i = CURVE_COLUMNS.index(name)
        return [r[i] for r in self.rows]

    def to_csv(self, path):
        with open(path, "w") as f:
            f.write(",".join(CURVE_COLUMNS) + "\n")
            for row in self.rows:
                f.write(",".join(str(v) if isinstance(v, int) else repr(float(v)) for v in row) + "\n")

    @classmethod
    def from_csv(cls, path):
        rows = []
        with open(path) as f:
            header = f.readline().strip().split(",")
            if tuple(header) != CURVE_COLUMNS:
                raise InputError(f"unexpected curve columns {header} in {path}")
            for line in f:
                vals = line.strip().split(",")
                rows.append((int(vals[0]),) + tuple(float(v) for v in vals[1:]))
        return cls(rows)


def evaluate_split(model, dataset, loss_name, batch_size=8):
    """Eval-mode loss / pixel accuracy / mean per-sample Dice over a split."""
    loss_fn = LOSSES[loss_name]
    total_loss = 0.0
    total_acc = 0.0
    dices = []
    n = 0
    for xb, yb, _ in batch_iterator(dataset, batch_size, shuffle_seed=0, policy=None, epoch=0):
        with T.no_grad():
            prob = model.forward(T.Tensor(xb), training=False).data
        total_loss += loss_fn(T.Tensor(prob), yb).item() * xb.shape[0]
        total_acc += pixel_accuracy(prob, yb) * xb.shape[0]
        for k in range(xb.shape[0]):
            dices.append(dice_2d(prob[k, 0] >= 0.5, yb[k, 0] > 0.5))
        n += xb.shape[0]
    return total_loss / n, total_acc / n, float(np.mean(dices))


def fit(model, train_set, val_set, config, out_dir=None, policy=None, progress=None):
    """Train the model; returns (model, CurveLog). Deterministic under config.seed."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise InputError("train and validation splits must be nonempty")
    loss_fn = LOSSES[config.loss]
    opt = SGD(model.parameters(), momentum=config.momentum)
    log = CurveLog()
    best_dice = -1.0
    for epoch in range(config.epochs):
        lr = lr_at_epoch(config, epoch)
        run_loss = 0.0
        run_acc = 0.0
        seen = 0
        for step, (xb, yb, _) in enumerate(
            batch_iterator(train_set, config.batch_size, config.seed, policy, epoch=epoch)
        ):
            pred = model.forward(T.Tensor(xb), training=True)
            loss = loss_fn(pred, yb)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergence(f"loss became {value} at epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr, context=f"at epoch {epoch} step {step}")
            run_loss += value * xb.shape[0]
            run_acc += pixel_accuracy(pred.data, yb) * xb.shape[0]
            seen += xb.shape[0]
        val_loss, val_acc, val_dice = evaluate_split(model, val_set, config.loss, config.batch_size)
        log.append(
            epoch=epoch,
            lr=lr,
            train_loss=run_loss / seen,
            train_acc=run_acc / seen,
            val_loss=val_loss,
            val_acc=val_acc,
            val_dice=val_dice,
        )
        if progress is not None:
            progress(epoch, log.rows[-1])
        if out_dir is not None:
            if (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(model, os.path.join(out_dir, f"epoch_{epoch:03d}"), config.seed, epoch)
            if val_dice > best_dice:
                best_dice = val_dice
                save_checkpoint(model, os.path.join(out_dir, "best"), config.seed, epoch)
    return model, log
