"""Segmentation metrics, threshold sweeps and dataset evaluation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


@dataclass(frozen=True)
class MetricRow:
    dsc: float
    iou: float
    precision: float
    recall: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.dsc, self.iou, self.precision, self.recall)


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    """1 where ``prob >= threshold``, else 0 (uint8)."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    return (_array(prob) >= threshold).astype(np.uint8)


def _check_binary(a: np.ndarray, what: str) -> None:
    if a.size and not np.all((a == 0) | (a == 1)):
        raise ValueError(f"{what} must be binary (0/1)")


def confusion(pred, gt) -> ConfusionCounts:
    pred, gt = _array(pred), _array(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    _check_binary(pred, "prediction")
    _check_binary(gt, "ground truth")
    p, g = pred.astype(bool), gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def metrics(cc: ConfusionCounts) -> MetricRow:
    """DSC, IoU, precision, recall. Empty prediction on empty ground truth scores 1."""
    if cc.tp + cc.fp + cc.fn == 0:
        return MetricRow(1.0, 1.0, 1.0, 1.0)
    return MetricRow(
        dsc=_ratio(2 * cc.tp, 2 * cc.tp + cc.fp + cc.fn),
        iou=_ratio(cc.tp, cc.tp + cc.fp + cc.fn),
        precision=_ratio(cc.tp, cc.tp + cc.fp),
        recall=_ratio(cc.tp, cc.tp + cc.fn),
    )


# -- threshold sweep ------------------------------------------------------------


@dataclass
class SweepTable:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["threshold", "tpr", "fpr", "precision", "recall"])
        for row in zip(self.thresholds, self.tpr, self.fpr, self.precision, self.recall):
            writer.writerow([f"{v:.6g}" for v in row])
        return buf.getvalue()


def sweep(probs: Sequence, gts: Sequence, thresholds: Sequence[float]) -> SweepTable:
    """ROC/PR points over the pooled pixel population of all images."""
    thresholds = np.asarray(list(thresholds), dtype=np.float64)
    if thresholds.size == 0:
        raise ValueError("threshold list is empty")
    if np.any(np.diff(thresholds) < 0) or thresholds.min() < 0 or thresholds.max() > 1:
        raise ValueError("thresholds must be sorted ascending within [0, 1]")
    p = np.concatenate([_array(x).ravel() for x in probs])
    g = np.concatenate([_array(x).ravel() for x in gts])
    if p.shape != g.shape:
        raise ValueError(f"pooled probability count {p.size} != ground-truth count {g.size}")
    _check_binary(g, "ground truth")
    g = g.astype(bool)
    pos = np.sort(p[g])
    neg = np.sort(p[~g])
    # number of values >= t in each population
    tp = pos.size - np.searchsorted(pos, thresholds, side="left")
    fp = neg.size - np.searchsorted(neg, thresholds, side="left")
    tpr = tp / pos.size if pos.size else np.zeros_like(thresholds)
    fpr = fp / neg.size if neg.size else np.zeros_like(thresholds)
    precision = np.divide(tp, tp + fp, out=np.zeros(thresholds.shape), where=(tp + fp) > 0)
    return SweepTable(thresholds, np.asarray(tpr, float), np.asarray(fpr, float), precision, np.asarray(tpr, float))


# -- dataset evaluation ---------------------------------------------------------


@dataclass
class MetricsReport:
    ids: list[str] = field(default_factory=list)
    rows: list[MetricRow] = field(default_factory=list)

    def add(self, image_id: str, row: MetricRow) -> None:
        self.ids.append(image_id)
        self.rows.append(row)

    @property
    def aggregate(self) -> MetricRow:
        if not self.rows:
            raise ValueError("report has no rows")
        mean = np.mean([r.as_tuple() for r in self.rows], axis=0)
        return MetricRow(*map(float, mean))

    @property
    def dsc(self) -> float:
        return self.aggregate.dsc

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["image_id", "dsc", "iou", "pre", "rec"])
        for ident, row in zip(self.ids, self.rows):
            writer.writerow([ident] + [f"{v:.6f}" for v in row.as_tuple()])
        writer.writerow(["AGGREGATE"] + [f"{v:.6f}" for v in self.aggregate.as_tuple()])
        return buf.getvalue()


def predict(model, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Probability maps N x H x W x 1 in inference mode (dropout off, no tape)."""
    was_training = model.training
    dtype = model.parameters()[0].dtype
    model.eval()
    try:
        out = [model(Tensor(images[i:i + batch_size], dtype=dtype)).data for i in range(0, len(images), batch_size)]
    finally:
        model.train(was_training)
    return np.concatenate(out, axis=0)


def evaluate(model, samples: Sequence, threshold: float = 0.5, batch_size: int = 8,
             probs: Optional[np.ndarray] = None) -> MetricsReport:
    """Per-image metrics plus the unweighted mean over images."""
    if len(samples) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    expected = tuple(model.cfg.input_size)
    for s in samples:
        if tuple(s.image.shape[:2]) != expected:
            raise ValueError(f"sample {s.id!r} is {s.image.shape[0]}x{s.image.shape[1]}, model expects {expected[0]}x{expected[1]}")
    if probs is None:
        probs = predict(model, np.stack([s.image for s in samples]).astype(np.float32), batch_size)
    report = MetricsReport()
    for s, p in zip(samples, probs):
        report.add(s.id, metrics(confusion(binarize(p, threshold), s.mask.astype(np.uint8))))
    return report
