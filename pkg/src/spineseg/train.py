"""Combined semantic/instance loss and the seeded training loop.

The semantic term is per-pixel multi-class cross-entropy on softmax
probabilities; the instance term is a soft Dice loss over the vertebra
classes present in the batch. Both are mixed by ``alpha`` (semantic weight).
"""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import evaluation
from .dataio import LabelMask
from .errors import ConfigError, DataError, DivergenceError
from .net import AttentionUNet

DICE_EPS = 1e-6


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    learning_rate: float = 1e-3
    alpha: float = 0.6  # semantic weight; (1 - alpha) goes to the instance term
    seed: int = 0
    validation_fraction: float = 0.2

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError("alpha must lie in [0, 1]")
        if not (0.0 < self.validation_fraction < 1.0):
            raise ConfigError("validation_fraction must lie in (0, 1)")


@dataclass
class TrainHistory:
    """Per-epoch training curves plus the per-step mean-IoU trace."""

    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    mean_iou: list[float] = field(default_factory=list)
    step_mean_iou: list[float] = field(default_factory=list)

    def save_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "train_acc", "val_acc", "mean_iou"])
            for e in range(len(self.train_loss)):
                writer.writerow(
                    [
                        e + 1,
                        repr(self.train_loss[e]),
                        repr(self.val_loss[e]),
                        repr(self.train_accuracy[e]),
                        repr(self.val_accuracy[e]),
                        repr(self.mean_iou[e]),
                    ]
                )

    @classmethod
    def load_csv(cls, path: str | Path) -> "TrainHistory":
        hist = cls()
        with Path(path).open(newline="") as fh:
            for row in csv.DictReader(fh):
                hist.train_loss.append(float(row["train_loss"]))
                hist.val_loss.append(float(row["val_loss"]))
                hist.train_accuracy.append(float(row["train_acc"]))
                hist.val_accuracy.append(float(row["val_acc"]))
                hist.mean_iou.append(float(row["mean_iou"]))
        return hist


def _as_target(target) -> torch.Tensor:
    if isinstance(target, LabelMask):
        target = target.raster
    if isinstance(target, np.ndarray):
        target = torch.from_numpy(np.ascontiguousarray(target))
    return target.long()


def _check_finite(logits: torch.Tensor) -> None:
    if not torch.isfinite(logits).all():
        raise DivergenceError("non-finite logits passed to loss")


def semantic_loss(logits: torch.Tensor, target) -> torch.Tensor:
    """Mean per-pixel cross-entropy of softmax probabilities vs. class indices."""
    _check_finite(logits)
    target = _as_target(target)
    if logits.ndim == 3:  # single (C, H, W) logit map with an (H, W) mask
        logits, target = logits.unsqueeze(0), target.unsqueeze(0)
    return F.cross_entropy(logits, target)


def instance_loss(logits: torch.Tensor, target) -> torch.Tensor:
    """Soft multi-class Dice loss over the vertebra classes in play.

    A vertebra class participates if it appears in the target or in the
    hard prediction; background and entirely absent classes are excluded.
    Returns 0 when neither side contains any vertebra.
    """
    _check_finite(logits)
    target = _as_target(target)
    if logits.ndim == 3:
        logits, target = logits.unsqueeze(0), target.unsqueeze(0)
    n_classes = logits.shape[1]
    probs = logits.softmax(dim=1)
    onehot = F.one_hot(target, num_classes=n_classes).permute(0, 3, 1, 2).to(probs.dtype)
    with torch.no_grad():
        present = torch.zeros(n_classes, dtype=torch.bool)
        present[target.unique()] = True
        present[logits.argmax(dim=1).unique()] = True
        present[0] = False  # background never participates
    if not present.any():
        return logits.sum() * 0.0  # keeps the graph; value is exactly 0
    inter = (probs * onehot).sum(dim=(0, 2, 3))
    sums = probs.sum(dim=(0, 2, 3)) + onehot.sum(dim=(0, 2, 3))
    dice_per_class = (2.0 * inter + DICE_EPS) / (sums + DICE_EPS)
    return 1.0 - dice_per_class[present].mean()


def combined_loss(logits: torch.Tensor, target, alpha: float = 0.6) -> torch.Tensor:
    """alpha * semantic + (1 - alpha) * instance."""
    if not (0.0 <= alpha <= 1.0):
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * semantic_loss(logits, target) + (1.0 - alpha) * instance_loss(logits, target)


def _stack_dataset(dataset) -> tuple[torch.Tensor, torch.Tensor]:
    if len(dataset) == 0:
        raise DataError("training dataset is empty")
    xs, ys = [], []
    shape = None
    for i, (x, y) in enumerate(dataset):
        x = np.asarray(x, dtype=np.float32)
        y = y.raster if isinstance(y, LabelMask) else np.asarray(y)
        if x.ndim != 2 or x.shape != y.shape:
            raise DataError(f"pair {i}: slice {x.shape} and mask {y.shape} must be equal 2D shapes")
        if shape is None:
            shape = x.shape
        elif x.shape != shape:
            raise DataError(f"pair {i}: shape {x.shape} differs from first pair {shape}")
        xs.append(x)
        ys.append(y.astype(np.int64))
    X = torch.from_numpy(np.stack(xs)).unsqueeze(1)
    Y = torch.from_numpy(np.stack(ys))
    return X, Y


def _batch_mean_iou(pred: torch.Tensor, target: torch.Tensor) -> float:
    total = None
    for b in range(pred.shape[0]):
        counts = evaluation.confusion(
            LabelMask(raster=pred[b].numpy().astype(np.uint8)),
            LabelMask(raster=target[b].numpy().astype(np.uint8)),
        )
        total = counts if total is None else total + counts
    return evaluation.mean_iou(total)


def _evaluate_split(
    model: AttentionUNet,
    X: torch.Tensor,
    Y: torch.Tensor,
    alpha: float,
    batch_size: int,
) -> tuple[float, float, float]:
    """(combined loss, pixel accuracy, mean IoU) on a data split."""
    model.eval()
    loss_sum = 0.0
    correct = 0
    counts = None
    with torch.no_grad():
        for start in range(0, len(X), batch_size):
            xb = X[start : start + batch_size]
            yb = Y[start : start + batch_size]
            logits = model(xb)
            loss = combined_loss(logits, yb, alpha)
            loss_sum += float(loss) * len(xb)
            pred = logits.argmax(dim=1)
            correct += int((pred == yb).sum())
            for b in range(pred.shape[0]):
                c = evaluation.confusion(
                    LabelMask(raster=pred[b].numpy().astype(np.uint8)),
                    LabelMask(raster=yb[b].numpy().astype(np.uint8)),
                )
                counts = c if counts is None else counts + c
    return loss_sum / len(X), correct / Y.numel(), evaluation.mean_iou(counts)


def train(
    model: AttentionUNet,
    dataset,
    config: TrainConfig,
) -> tuple[AttentionUNet, TrainHistory]:
    """Train on (slice, mask) pairs; returns best-validation-loss parameters.

    Deterministic for a fixed config seed: the train/validation split, epoch
    shuffles, and parameter updates all derive from it. When the dataset is
    too small for a non-empty validation split, validation metrics are
    computed on the training data instead.
    """
    X, Y = _stack_dataset(dataset)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    n = len(X)
    perm = rng.permutation(n)
    n_val = min(int(round(config.validation_fraction * n)), n - 1)
    if n_val > 0:
        val_idx = torch.from_numpy(perm[:n_val].copy())
        train_idx = torch.from_numpy(perm[n_val:].copy())
    else:
        val_idx = torch.from_numpy(perm.copy())
        train_idx = torch.from_numpy(perm.copy())

    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    history = TrainHistory()
    best_val = float("inf")
    best_state = None

    for epoch in range(config.epochs):
        model.train()
        order = train_idx[torch.from_numpy(rng.permutation(len(train_idx)).copy())]
        loss_sum = 0.0
        n_batches = 0
        correct = 0
        seen = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            xb, yb = X[idx], Y[idx]
            optimizer.zero_grad()
            logits = model(xb)
            loss = combined_loss(logits, yb, config.alpha)
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch + 1}, batch {n_batches + 1}"
                )
            loss.backward()
            optimizer.step()
            loss_sum += float(loss)
            n_batches += 1
            with torch.no_grad():
                pred = logits.argmax(dim=1)
                correct += int((pred == yb).sum())
                seen += yb.numel()
                history.step_mean_iou.append(_batch_mean_iou(pred, yb))

        val_loss, val_acc, val_miou = _evaluate_split(
            model, X[val_idx], Y[val_idx], config.alpha, config.batch_size
        )
        if not np.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch + 1}")
        history.train_loss.append(loss_sum / n_batches)
        history.val_loss.append(val_loss)
        history.train_accuracy.append(correct / seen)
        history.val_accuracy.append(val_acc)
        history.mean_iou.append(val_miou)
        if val_loss < best_val:
            best_val = val_loss
            best_state = copy.deepcopy(model.state_dict())

    if best_state is not None:
        model.load_state_dict(best_state)
    return model, history
