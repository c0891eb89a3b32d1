"""Segmentation metrics from confusion counts, and a per-class classification report."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

METRIC_NAMES = ("precision", "recall", "accuracy", "f1", "iou", "dice")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    accuracy: float
    f1: float
    iou: float
    dice: float
    counts: ConfusionCounts
    aggregation: str = "micro"

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in METRIC_NAMES}


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    """1 where ``prob >= threshold``, else 0 (uint8)."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def _check_binary(a: np.ndarray, what: str) -> None:
    if not np.all((a == 0) | (a == 1)):
        raise ValueError(f"confusion_counts: {what} mask is not binary")


def confusion_counts(pred, gt) -> ConfusionCounts:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"confusion_counts: shape mismatch {pred.shape} vs {gt.shape}")
    _check_binary(pred, "predicted")
    _check_binary(gt, "ground-truth")
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, p.size - tp - fp - fn, fp, fn)


def _ratio(num: int, den: int) -> float:
    # 0/0 only happens when the error terms in the denominator are zero too
    return 1.0 if den == 0 else num / den


def compute_metrics(c: ConfusionCounts, aggregation: str = "micro") -> MetricsReport:
    """Precision, recall, accuracy, F1, IoU (intersection over union) and Dice."""
    if c.total <= 0:
        raise ValueError("compute_metrics: all confusion counts are zero")
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    accuracy = (c.tp + c.tn) / c.total
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    iou = _ratio(c.tp, c.tp + c.fp + c.fn)
    dice = _ratio(2 * c.tp, 2 * c.tp + c.fn + c.fp)
    return MetricsReport(precision, recall, accuracy, f1, iou, dice, c, aggregation)


def evaluate_dataset(preds: Sequence, gts: Sequence, aggregation: str = "micro") -> MetricsReport:
    """Score aligned mask lists.

    micro: sum counts over the set, then compute metrics once.
    per-image-mean: compute metrics per image and average them.
    """
    if len(preds) != len(gts):
        raise ValueError(f"evaluate_dataset: {len(preds)} predictions vs {len(gts)} ground truths")
    if not preds:
        raise ValueError("evaluate_dataset: empty dataset")
    counts = [confusion_counts(p, g) for p, g in zip(preds, gts)]
    total = counts[0]
    for c in counts[1:]:
        total = total + c
    if aggregation == "micro":
        return compute_metrics(total, "micro")
    if aggregation == "per-image-mean":
        per = [compute_metrics(c) for c in counts]
        means = {name: float(np.mean([getattr(r, name) for r in per])) for name in METRIC_NAMES}
        return MetricsReport(counts=total, aggregation="per-image-mean", **means)
    raise ValueError(f"unknown aggregation {aggregation!r}")


def reports_to_csv(reports: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("aggregation",) + METRIC_NAMES + ("tp", "tn", "fp", "fn"))
    for r in reports:
        c = r.counts
        w.writerow([r.aggregation] + [f"{getattr(r, n):.6f}" for n in METRIC_NAMES] + [c.tp, c.tn, c.fp, c.fn])
    return buf.getvalue()


@dataclass
class ClassRow:
    label: str
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class ClassificationReport:
    rows: list
    weighted: ClassRow
    accuracy: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("class", "precision", "recall", "f1", "support"))
        for r in self.rows + [self.weighted]:
            w.writerow((r.label, f"{r.precision:.4f}", f"{r.recall:.4f}", f"{r.f1:.4f}", r.support))
        w.writerow(("accuracy", f"{self.accuracy:.4f}", "", "", sum(r.support for r in self.rows)))
        return buf.getvalue()


def classification_report(pred_labels, true_labels, k: int) -> ClassificationReport:
    """One-vs-rest precision/recall/F1 per class plus support-weighted averages."""
    pred = np.asarray(pred_labels, dtype=np.int64)
    true = np.asarray(true_labels, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"classification_report: {pred.shape} predictions vs {true.shape} labels")
    for arr in (pred, true):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"classification_report: labels must lie in [0, {k})")
    rows = []
    for cls in range(k):
        tp = int(np.count_nonzero((pred == cls) & (true == cls)))
        fp = int(np.count_nonzero((pred == cls) & (true != cls)))
        fn = int(np.count_nonzero((pred != cls) & (true == cls)))
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        rows.append(ClassRow(str(cls), prec, rec, f1, tp + fn))
    support = np.array([r.support for r in rows], dtype=float)
    n = support.sum()
    weights = support / n if n else np.zeros(k)
    weighted = ClassRow(
        "weighted",
        float(sum(w * r.precision for w, r in zip(weights, rows))),
        float(sum(w * r.recall for w, r in zip(weights, rows))),
        float(sum(w * r.f1 for w, r in zip(weights, rows))),
        int(n),
    )
    accuracy = float(np.mean(pred == true)) if pred.size else 0.0
    return ClassificationReport(rows, weighted, accuracy)
