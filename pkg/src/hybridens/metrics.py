"""Binary-classification scoring: confusion counts, ACC/SEN/SPE, ROC, AUC."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class RocCurve:
    """Ordered (FPR, TPR) points from (0, 0) to (1, 1), both nondecreasing."""

    points: list[tuple[float, float]]


def threshold(p: float, tau: float = 0.5) -> int:
    """Hard label 1 iff p > tau; ties at tau classify negative."""
    return 1 if p > tau else 0


def confusion(labels, predictions) -> ConfusionMatrix:
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape:
        raise DataError(
            f"labels and predictions have different lengths: {labels.shape} vs {predictions.shape}"
        )
    if labels.size == 0:
        raise DataError("cannot score an empty sample set")
    tp = int(np.sum((labels == 1) & (predictions == 1)))
    fp = int(np.sum((labels == 0) & (predictions == 1)))
    tn = int(np.sum((labels == 0) & (predictions == 0)))
    fn = int(np.sum((labels == 1) & (predictions == 0)))
    return ConfusionMatrix(tp=tp, fp=fp, tn=tn, fn=fn)


def acc_sen_spe(cm: ConfusionMatrix) -> tuple[float, float, float]:
    """(accuracy, sensitivity, specificity) as fractions.

    A class with no members makes its rate undefined; that slot is returned
    as NaN rather than a fabricated 0 or 1.
    """
    total = cm.total
    acc = (cm.tp + cm.tn) / total
    sen = cm.tp / (cm.tp + cm.fn) if (cm.tp + cm.fn) > 0 else math.nan
    spe = cm.tn / (cm.tn + cm.fp) if (cm.tn + cm.fp) > 0 else math.nan
    return acc, sen, spe


def roc_curve(labels, scores) -> RocCurve:
    """ROC points, one per distinct score plus the (0, 0) start.

    Equal scores collapse into a single threshold step, which draws tied
    positive/negative groups as diagonal segments; together with the
    trapezoid rule this makes the curve's area exactly the Mann-Whitney
    statistic with ties counted one half.
    """
    labels = np.asarray(labels, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape:
        raise DataError("labels and scores have different lengths")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC needs both classes present")
    order = np.argsort(-scores, kind="stable")
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < len(order):
        j = i
        while j < len(order) and scores[order[j]] == scores[order[i]]:
            if labels[order[j]] == 1:
                tp += 1
            else:
                fp += 1
            j += 1
        points.append((fp / n_neg, tp / n_pos))
        i = j
    return RocCurve(points=points)


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the ROC curve."""
    area = 0.0
    for (x0, y0), (x1, y1) in zip(curve.points, curve.points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def roc_points_csv(curve: RocCurve) -> str:
    """Render the curve as `fpr,tpr` CSV text for external plotting."""
    lines = ["fpr,tpr"]
    for x, y in curve.points:
        lines.append(f"{x!r},{y!r}")
    return "\n".join(lines) + "\n"
