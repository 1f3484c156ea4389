"""Segmentation metrics, slice-wise volumetric inference, and report emission.

Confusion counts are pixel-level one-vs-rest per vertebra class; IoU, Dice,
and class accuracy all derive from them. An auxiliary object-level detection
rate (vertebra detected when its per-slice IoU reaches 0.5) is reported
alongside, since whole-vertebra hit/miss is the other natural reading of
TP/FN for this task.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import preprocess as pp
from .dataio import MAX_CLASS_CODE, LabelMask, SliceStack
from .errors import DataError
from .net import AttentionUNet

VERTEBRA_CLASSES = tuple(range(1, MAX_CLASS_CODE + 1))
DETECTION_IOU_THRESHOLD = 0.5


@dataclass
class ConfusionCounts:
    """Per-class one-vs-rest pixel counts for classes 1..7.

    Arrays are indexed by ``class_code - 1``; for every class,
    tp + fp + fn + tn equals the total pixel count.
    """

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            if arr.shape != (len(VERTEBRA_CLASSES),):
                raise DataError(f"{name} must have shape ({len(VERTEBRA_CLASSES)},)")
            setattr(self, name, arr)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            tp=self.tp + other.tp,
            fp=self.fp + other.fp,
            fn=self.fn + other.fn,
            tn=self.tn + other.tn,
        )

    def _idx(self, class_code: int) -> int:
        if class_code not in VERTEBRA_CLASSES:
            raise DataError(f"class code must be in {VERTEBRA_CLASSES}, got {class_code}")
        return class_code - 1


def confusion(pred: LabelMask, truth: LabelMask) -> ConfusionCounts:
    """Pixel-level one-vs-rest confusion counts for each vertebra class."""
    if pred.shape != truth.shape:
        raise DataError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    p, t = pred.raster, truth.raster
    tp = np.empty(len(VERTEBRA_CLASSES), dtype=np.int64)
    fp = np.empty_like(tp)
    fn = np.empty_like(tp)
    tn = np.empty_like(tp)
    for i, c in enumerate(VERTEBRA_CLASSES):
        pc = p == c
        tc = t == c
        tp[i] = np.count_nonzero(pc & tc)
        fp[i] = np.count_nonzero(pc & ~tc)
        fn[i] = np.count_nonzero(~pc & tc)
        tn[i] = np.count_nonzero(~pc & ~tc)
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def iou(counts: ConfusionCounts, class_code: int) -> float:
    """TP / (TP + FP + FN); 0.0 when the union is empty."""
    i = counts._idx(class_code)
    union = counts.tp[i] + counts.fp[i] + counts.fn[i]
    if union == 0:
        return 0.0
    return float(counts.tp[i] / union)


def _present_classes(counts: ConfusionCounts) -> list[int]:
    """Classes whose prediction-truth union is non-empty."""
    return [
        c
        for c in VERTEBRA_CLASSES
        if counts.tp[c - 1] + counts.fp[c - 1] + counts.fn[c - 1] > 0
    ]


def mean_iou(counts: ConfusionCounts) -> float:
    """Mean IoU over classes with a non-empty union; 1.0 when none is present."""
    present = _present_classes(counts)
    if not present:
        return 1.0
    return float(np.mean([iou(counts, c) for c in present]))


def mean_dice(counts: ConfusionCounts) -> float:
    """Mean Dice over classes with a non-empty union; 1.0 when none is present."""
    present = _present_classes(counts)
    if not present:
        return 1.0
    return float(np.mean([dice_from_counts(counts, c) for c in present]))


def class_accuracy(counts: ConfusionCounts, class_code: int) -> float:
    """(TN + TP) / (TN + TP + FP + FN) for one one-vs-rest class."""
    i = counts._idx(class_code)
    total = counts.tp[i] + counts.fp[i] + counts.fn[i] + counts.tn[i]
    return float((counts.tn[i] + counts.tp[i]) / total)


def dice_from_counts(counts: ConfusionCounts, class_code: int) -> float:
    """2TP / (2TP + FP + FN); 1.0 when pred and truth are both empty."""
    i = counts._idx(class_code)
    denom = 2 * counts.tp[i] + counts.fp[i] + counts.fn[i]
    if denom == 0:
        return 1.0
    return float(2 * counts.tp[i] / denom)


def dice(pred_binary: np.ndarray, truth_binary: np.ndarray) -> float:
    """Dice coefficient 2|X n Y| / (|X| + |Y|) of two binary masks.

    Both masks empty counts as perfect agreement (1.0).
    """
    a = np.asarray(pred_binary, dtype=bool)
    b = np.asarray(truth_binary, dtype=bool)
    if a.shape != b.shape:
        raise DataError(f"mask shapes differ: {a.shape} vs {b.shape}")
    size_sum = int(a.sum()) + int(b.sum())
    if size_sum == 0:
        return 1.0
    return float(2.0 * np.count_nonzero(a & b) / size_sum)


@dataclass
class ClassMetrics:
    tp: int
    fp: int
    fn: int
    tn: int
    iou: float
    dice: float
    accuracy: float


@dataclass
class MetricsReport:
    """Per-class and aggregate metrics, with an optional per-slice breakdown."""

    per_class: dict[int, ClassMetrics]
    mean_iou: float
    mean_dice: float
    mean_class_accuracy: float
    pixel_accuracy: float | None = None
    object_detection_rate: float | None = None
    cross_entropy: float | None = None
    per_slice: list[dict] = field(default_factory=list)


def compute_report(
    pred_masks: list[LabelMask],
    truth_masks: list[LabelMask],
    cross_entropy: float | None = None,
) -> MetricsReport:
    """Aggregate metrics over aligned lists of predicted and true masks."""
    if len(pred_masks) != len(truth_masks):
        raise DataError(f"mask counts differ: {len(pred_masks)} vs {len(truth_masks)}")
    if not pred_masks:
        raise DataError("cannot evaluate zero slices")
    total: ConfusionCounts | None = None
    per_slice = []
    detected = 0
    instances = 0
    correct_px = 0
    total_px = 0
    for i, (p, t) in enumerate(zip(pred_masks, truth_masks)):
        counts = confusion(p, t)
        total = counts if total is None else total + counts
        correct_px += int(np.count_nonzero(p.raster == t.raster))
        total_px += p.raster.size
        per_slice.append(
            {
                "slice": i,
                "mean_iou": mean_iou(counts),
                "mean_dice": mean_dice(counts),
                "pixel_accuracy": float(np.count_nonzero(p.raster == t.raster) / p.raster.size),
            }
        )
        for c in VERTEBRA_CLASSES:
            if counts.tp[c - 1] + counts.fn[c - 1] > 0:  # vertebra present in truth
                instances += 1
                if iou(counts, c) >= DETECTION_IOU_THRESHOLD:
                    detected += 1
    assert total is not None
    per_class = {
        c: ClassMetrics(
            tp=int(total.tp[c - 1]),
            fp=int(total.fp[c - 1]),
            fn=int(total.fn[c - 1]),
            tn=int(total.tn[c - 1]),
            iou=iou(total, c),
            dice=dice_from_counts(total, c),
            accuracy=class_accuracy(total, c),
        )
        for c in VERTEBRA_CLASSES
    }
    return MetricsReport(
        per_class=per_class,
        mean_iou=mean_iou(total),
        mean_dice=mean_dice(total),
        mean_class_accuracy=float(np.mean([per_class[c].accuracy for c in VERTEBRA_CLASSES])),
        pixel_accuracy=correct_px / total_px,
        object_detection_rate=(detected / instances) if instances else None,
        cross_entropy=cross_entropy,
        per_slice=per_slice,
    )


def report_to_csv(report: MetricsReport, path: str | Path) -> None:
    """Write per-class rows with header ``class,tp,fp,fn,tn,iou,dice,accuracy``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "tp", "fp", "fn", "tn", "iou", "dice", "accuracy"])
        for c in VERTEBRA_CLASSES:
            m = report.per_class[c]
            writer.writerow([c, m.tp, m.fp, m.fn, m.tn, repr(m.iou), repr(m.dice), repr(m.accuracy)])


def report_from_csv(path: str | Path) -> MetricsReport:
    """Rebuild the CSV-covered part of a report (per-class rows and means)."""
    per_class = {}
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            per_class[int(row["class"])] = ClassMetrics(
                tp=int(row["tp"]),
                fp=int(row["fp"]),
                fn=int(row["fn"]),
                tn=int(row["tn"]),
                iou=float(row["iou"]),
                dice=float(row["dice"]),
                accuracy=float(row["accuracy"]),
            )
    if sorted(per_class) != list(VERTEBRA_CLASSES):
        raise DataError(f"{path}: expected one row per class {VERTEBRA_CLASSES}")
    total = ConfusionCounts(
        tp=np.array([per_class[c].tp for c in VERTEBRA_CLASSES]),
        fp=np.array([per_class[c].fp for c in VERTEBRA_CLASSES]),
        fn=np.array([per_class[c].fn for c in VERTEBRA_CLASSES]),
        tn=np.array([per_class[c].tn for c in VERTEBRA_CLASSES]),
    )
    return MetricsReport(
        per_class=per_class,
        mean_iou=mean_iou(total),
        mean_dice=mean_dice(total),
        mean_class_accuracy=float(np.mean([per_class[c].accuracy for c in VERTEBRA_CLASSES])),
    )


def predict_volume(
    model: AttentionUNet,
    stack: SliceStack,
    preprocess_config: pp.PreprocessConfig,
    batch_size: int = 8,
) -> list[LabelMask]:
    """Slice-wise inference over a stack, one mask per slice.

    Each slice is denoised, resized, and normalized per the config, pushed
    through the network, argmax-decoded, and the mask resized back (nearest
    neighbor) to the original slice dimensions.
    """
    h, w = stack.slice_shape
    prepared = np.stack(
        [
            pp.resize_and_normalize(pp.denoise(stack.slices[i], preprocess_config), preprocess_config)
            for i in range(stack.n_slices)
        ]
    )
    model.eval()
    masks: list[LabelMask] = []
    with torch.no_grad():
        for start in range(0, len(prepared), batch_size):
            batch = torch.from_numpy(prepared[start : start + batch_size]).unsqueeze(1)
            logits = model(batch)
            pred = logits.softmax(dim=1).argmax(dim=1).numpy().astype(np.uint8)
            for k in range(pred.shape[0]):
                masks.append(pp.resize_mask(LabelMask(raster=pred[k]), (h, w)))
    return masks


def emit_report(histories, metrics: MetricsReport, out_dir: str | Path) -> list[Path]:
    """Write plots, ``metrics.csv``, and ``report.md`` into ``out_dir``.

    ``histories`` is a training history (or list of them) with per-epoch
    ``train_loss``, ``val_loss``, ``train_accuracy``, ``val_accuracy``, and
    ``mean_iou``; pass an empty list to skip the training plots.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if histories is None:
        histories = []
    if hasattr(histories, "train_loss"):
        histories = [histories]
    for hist in histories:
        if not hist.train_loss:
            raise DataError("cannot plot an empty training history")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def lineplot(fname: str, series: list[tuple[str, list[float]]], ylabel: str) -> None:
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, values in series:
            ax.plot(range(1, len(values) + 1), values, marker="o", markersize=3, label=label)
        ax.set_xlabel("epoch")
        ax.set_ylabel(ylabel)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / fname, dpi=120)
        plt.close(fig)
        written.append(out_dir / fname)

    if histories:
        loss_series = []
        acc_series = []
        for i, hist in enumerate(histories):
            tag = f" ({i})" if len(histories) > 1 else ""
            loss_series += [(f"train{tag}", hist.train_loss), (f"val{tag}", hist.val_loss)]
            acc_series += [
                (f"train{tag}", hist.train_accuracy),
                (f"val{tag}", hist.val_accuracy),
            ]
        lineplot("loss_vs_epoch.png", loss_series, "combined loss")
        lineplot("accuracy_vs_epoch.png", acc_series, "pixel accuracy")

    fig, ax = plt.subplots(figsize=(6, 4))
    classes = list(metrics.per_class)
    ax.bar([str(c) for c in classes], [metrics.per_class[c].iou for c in classes])
    ax.axhline(metrics.mean_iou, color="tab:red", linestyle="--", label="mean IoU")
    ax.set_xlabel("class code")
    ax.set_ylabel("IoU")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "iou_per_class.png", dpi=120)
    plt.close(fig)
    written.append(out_dir / "iou_per_class.png")

    report_to_csv(metrics, out_dir / "metrics.csv")
    written.append(out_dir / "metrics.csv")

    md = _render_markdown(histories, metrics)
    (out_dir / "report.md").write_text(md)
    written.append(out_dir / "report.md")
    return written


def _render_markdown(histories, metrics: MetricsReport) -> str:
    def pct(x: float) -> str:
        return f"{100.0 * x:.2f}%"

    lines = ["# Segmentation evaluation report", ""]
    lines += ["## Aggregate metrics", ""]
    lines.append(f"- mean IoU: {metrics.mean_iou:.4f}")
    lines.append(f"- mean Dice: {metrics.mean_dice:.4f}")
    lines.append(f"- mean class accuracy: {pct(metrics.mean_class_accuracy)}")
    if metrics.pixel_accuracy is not None:
        lines.append(f"- pixel accuracy: {pct(metrics.pixel_accuracy)}")
    if metrics.object_detection_rate is not None:
        lines.append(
            f"- object-level detection rate (IoU >= {DETECTION_IOU_THRESHOLD}): "
            f"{pct(metrics.object_detection_rate)}"
        )
    if metrics.cross_entropy is not None:
        lines.append(f"- cross-entropy: {metrics.cross_entropy:.6f}")
    lines.append("")

    lines += ["## Per-class metrics", ""]
    lines.append("| class | TP | FP | FN | TN | IoU | Dice | accuracy |")
    lines.append("|---|---|---|---|---|---|---|---|")
    for c, m in metrics.per_class.items():
        lines.append(
            f"| {c} | {m.tp} | {m.fp} | {m.fn} | {m.tn} | "
            f"{m.iou:.4f} | {m.dice:.4f} | {m.accuracy:.4f} |"
        )
    lines.append("")

    lines += ["## Method comparison", ""]
    lines.append("| Method | Accuracy | Dice Score |")
    lines.append("|---|---|---|")
    lines.append(
        f"| this run | {pct(metrics.mean_class_accuracy)} | {metrics.mean_dice:.2f} |"
    )
    lines.append("| Modified Attention U-Net (reported) | 99.70% | 0.98 |")
    lines.append("")

    if histories:
        lines += ["## Training summary", ""]
        for i, hist in enumerate(histories):
            lines.append(
                f"- run {i}: {len(hist.train_loss)} epochs, "
                f"final train loss {hist.train_loss[-1]:.6f}, "
                f"final val loss {hist.val_loss[-1]:.6f}, "
                f"final val mean IoU {hist.mean_iou[-1]:.4f}"
            )
        lines.append("")

    if metrics.per_slice:
        lines += ["## Per-slice breakdown", ""]
        lines.append("| slice | mean IoU | mean Dice | pixel accuracy |")
        lines.append("|---|---|---|---|")
        for row in metrics.per_slice:
            lines.append(
                f"| {row['slice']} | {row['mean_iou']:.4f} | "
                f"{row['mean_dice']:.4f} | {row['pixel_accuracy']:.4f} |"
            )
        lines.append("")
    return "\n".join(lines)
