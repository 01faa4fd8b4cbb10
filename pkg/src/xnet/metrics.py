"""Test-time evaluation: confusion, F1, ROC/AUC, calibration, thresholding.

All metrics are pixel-level folds pooled over whatever batch they are given;
merging across images is plain addition of confusion counts and rank sums.
Class conventions follow the mask encoding (0 open beam, 1 soft tissue,
2 bone).  Per-class "accuracy" is recall — the row-normalised diagonal of
the confusion matrix — and weighted averages weight by true-pixel support.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from PIL import Image

from .data import LABEL_NAMES
from .errors import DimensionError, LabelDomainError, UndefinedMetricError

__all__ = [
    "MASK_PALETTE",
    "ConfusionMatrix",
    "ClassMetrics",
    "RocCurve",
    "confusion",
    "categorical_accuracy",
    "per_class_metrics",
    "roc_auc",
    "confidence",
    "confidence_sum",
    "calibration_gap",
    "threshold_soft_tissue",
    "reliability_histogram",
    "evaluate_segmentation",
    "metrics_report_csv",
    "roc_points_csv",
    "reliability_csv",
    "render_mask_png",
]

# render colours for classes 0, 1, 2
MASK_PALETTE = ((68, 1, 84), (53, 183, 121), (253, 231, 37))

SOFT_TISSUE = 1


def _flat_probs(prob_map: np.ndarray) -> np.ndarray:
    """Probabilities as (pixels, K) regardless of batch layout."""
    probs = np.asarray(prob_map, dtype=np.float64)
    if probs.ndim == 3:
        probs = probs[None]
    if probs.ndim != 4:
        raise DimensionError(
            f"probability map must be (K,h,w) or (n,K,h,w), got ndim={probs.ndim}"
        )
    n, k, h, w = probs.shape
    return probs.transpose(0, 2, 3, 1).reshape(-1, k)


def _flat_labels(mask: np.ndarray, k: int, name: str) -> np.ndarray:
    labels = np.asarray(mask).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelDomainError(
            f"{name} contains labels outside [0, {k}): "
            f"range [{labels.min()}, {labels.max()}]"
        )
    return labels.astype(np.intp)


# ---------------------------------------------------------------------------
# confusion matrix and derived rates


@dataclass
class ConfusionMatrix:
    """Pixel counts; rows are the true class, columns the predicted class."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise DimensionError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise LabelDomainError("confusion counts must be non-negative")

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def total(self) -> int:
        return int(self.counts.sum())

    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def accuracy(self) -> float:
        """Overall categorical accuracy: trace over total."""
        return float(np.trace(self.counts)) / self.total()


def confusion(pred_mask: np.ndarray, true_mask: np.ndarray, num_classes: int) -> ConfusionMatrix:
    pred = np.asarray(pred_mask)
    true = np.asarray(true_mask)
    if pred.shape != true.shape:
        raise DimensionError(
            f"prediction shape {pred.shape} != truth shape {true.shape}"
        )
    p = _flat_labels(pred, num_classes, "prediction")
    t = _flat_labels(true, num_classes, "truth")
    counts = np.bincount(t * num_classes + p, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes))


def categorical_accuracy(prob_map: np.ndarray, true_mask: np.ndarray) -> float:
    """Fraction of pixels whose argmax class matches the truth.

    Ties go to the lowest class index.
    """
    probs = _flat_probs(prob_map)
    labels = _flat_labels(true_mask, probs.shape[1], "truth")
    if labels.size != probs.shape[0]:
        raise DimensionError(
            f"probability map covers {probs.shape[0]} pixels, truth {labels.size}"
        )
    return float((probs.argmax(axis=1) == labels).mean())


@dataclass
class ClassMetrics:
    """Per-class rates plus supports; weighted averages via :meth:`weighted`."""

    support: np.ndarray
    accuracy: np.ndarray  # per-class recall
    precision: np.ndarray
    f1: np.ndarray
    auc: Optional[np.ndarray] = None
    confidence: Optional[np.ndarray] = None

    def weighted(self, metric: str) -> float:
        values = getattr(self, metric)
        if values is None:
            raise UndefinedMetricError(f"{metric} has not been computed")
        total = self.support.sum()
        if total == 0:
            raise UndefinedMetricError("no pixels with ground truth")
        return float((np.asarray(values) * self.support).sum() / total)


def _safe_ratio(numerator, denominator, what: str) -> float:
    if denominator == 0:
        warnings.warn(f"{what} undefined (0/0); reporting 0", stacklevel=3)
        return 0.0
    return float(numerator) / float(denominator)


def per_class_metrics(cm: ConfusionMatrix) -> ClassMetrics:
    """Recall (per-class accuracy), precision, and F1 = 2PR/(P+R) from counts."""
    counts = cm.counts
    k = cm.num_classes
    support = counts.sum(axis=1)
    predicted = counts.sum(axis=0)
    recall = np.zeros(k)
    precision = np.zeros(k)
    f1 = np.zeros(k)
    for c in range(k):
        diag = counts[c, c]
        recall[c] = _safe_ratio(diag, support[c], f"recall of class {c}")
        precision[c] = _safe_ratio(diag, predicted[c], f"precision of class {c}")
        if precision[c] + recall[c] == 0:
            warnings.warn(f"F1 of class {c} undefined (P+R=0); reporting 0", stacklevel=2)
            f1[c] = 0.0
        else:
            f1[c] = 2 * precision[c] * recall[c] / (precision[c] + recall[c])
    return ClassMetrics(support=support, accuracy=recall, precision=precision, f1=f1)


# ---------------------------------------------------------------------------
# ROC / AUC


@dataclass
class RocCurve:
    """One-vs-rest operating points ordered by decreasing threshold."""

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray

    def __post_init__(self):
        for arr in (self.fpr, self.tpr):
            if (np.diff(arr) < 0).any():
                raise UndefinedMetricError("ROC points must be monotone")


def roc_auc(
    prob_map: np.ndarray, true_mask: np.ndarray, class_index: int
) -> tuple[RocCurve, float]:
    """ROC curve and trapezoidal AUC for one class against the rest.

    The trapezoid over tie plateaus equals the rank statistic (probability a
    random positive outscores a random negative, ties counting one half).
    """
    probs = _flat_probs(prob_map)
    if not 0 <= class_index < probs.shape[1]:
        raise LabelDomainError(
            f"class index {class_index} outside [0, {probs.shape[1]})"
        )
    labels = _flat_labels(true_mask, probs.shape[1], "truth")
    scores = probs[:, class_index]
    positive = labels == class_index
    num_pos = int(positive.sum())
    num_neg = positive.size - num_pos
    if num_pos == 0 or num_neg == 0:
        raise UndefinedMetricError(
            f"AUC undefined for class {class_index}: "
            f"{num_pos} positive and {num_neg} negative pixels"
        )

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_pos = positive[order]
    # indices where a run of equal scores ends
    distinct = np.nonzero(np.diff(sorted_scores))[0]
    boundaries = np.concatenate([distinct, [scores.size - 1]])
    tp = np.cumsum(sorted_pos)[boundaries]
    fp = (boundaries + 1) - tp
    thresholds = np.concatenate([[np.inf], sorted_scores[boundaries]])
    tpr = np.concatenate([[0.0], tp / num_pos])
    fpr = np.concatenate([[0.0], fp / num_neg])
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(thresholds=thresholds, fpr=fpr, tpr=tpr), auc


# ---------------------------------------------------------------------------
# confidence and calibration


def confidence_sum(prob_map: np.ndarray, pred_mask: np.ndarray, class_index: int) -> float:
    """Summed predicted probability over the pixels assigned to a class."""
    probs = _flat_probs(prob_map)
    pred = _flat_labels(pred_mask, probs.shape[1], "prediction")
    assigned = pred == class_index
    if not assigned.any():
        raise UndefinedMetricError(
            f"confidence undefined: no pixels assigned to class {class_index}"
        )
    return float(probs[assigned, class_index].sum())


def confidence(prob_map: np.ndarray, pred_mask: np.ndarray, class_index: int) -> float:
    """Mean predicted probability over the pixels assigned to a class.

    The mean (rather than the raw sum) is what lines up against accuracy
    when judging calibration.
    """
    pred = np.asarray(pred_mask).reshape(-1)
    assigned = int((pred == class_index).sum())
    if assigned == 0:
        raise UndefinedMetricError(
            f"confidence undefined: no pixels assigned to class {class_index}"
        )
    return confidence_sum(prob_map, pred_mask, class_index) / assigned


def calibration_gap(metrics: ClassMetrics) -> tuple[np.ndarray, float]:
    """|confidence - accuracy| per class, and for the weighted averages."""
    if metrics.confidence is None:
        raise UndefinedMetricError("confidence has not been computed")
    per_class = np.abs(np.asarray(metrics.confidence) - np.asarray(metrics.accuracy))
    weighted = abs(metrics.weighted("confidence") - metrics.weighted("accuracy"))
    return per_class, weighted


# ---------------------------------------------------------------------------
# soft-tissue thresholding


def threshold_soft_tissue(prob_map: np.ndarray, tau: float) -> np.ndarray:
    """Assign soft tissue only when its probability exceeds ``tau``.

    Pixels failing the test take the argmax over the remaining classes.
    Raising ``tau`` can only shrink the soft-tissue region, so false and
    true positives both fall monotonically.
    """
    if not 0.0 <= tau <= 1.0:
        raise LabelDomainError(f"tau must be in [0, 1], got {tau}")
    probs = np.asarray(prob_map, dtype=np.float64)
    squeeze = probs.ndim == 3
    if squeeze:
        probs = probs[None]
    if probs.ndim != 4 or probs.shape[1] <= SOFT_TISSUE:
        raise DimensionError(
            f"probability map must be (n,K,h,w) with K > {SOFT_TISSUE}, "
            f"got shape {probs.shape}"
        )
    others = np.delete(probs, SOFT_TISSUE, axis=1)
    other_classes = np.delete(np.arange(probs.shape[1]), SOFT_TISSUE)
    fallback = other_classes[others.argmax(axis=1)]
    pred = np.where(probs[:, SOFT_TISSUE] > tau, SOFT_TISSUE, fallback)
    return pred[0] if squeeze else pred


# ---------------------------------------------------------------------------
# reliability histogram


def reliability_histogram(
    prob_map: np.ndarray, true_mask: np.ndarray, bins: int = 10
) -> list[tuple[int, int, float, float]]:
    """Bin pixels by predicted-class probability: (bin, count, conf, acc).

    Mean confidence and accuracy are NaN for empty bins.  Bin b covers
    [b/bins, (b+1)/bins), with the top bin closed at 1.
    """
    probs = _flat_probs(prob_map)
    labels = _flat_labels(true_mask, probs.shape[1], "truth")
    pred = probs.argmax(axis=1)
    top = probs[np.arange(probs.shape[0]), pred]
    correct = (pred == labels).astype(np.float64)
    which = np.minimum((top * bins).astype(np.intp), bins - 1)
    rows = []
    for b in range(bins):
        inside = which == b
        count = int(inside.sum())
        if count:
            rows.append((b, count, float(top[inside].mean()), float(correct[inside].mean())))
        else:
            rows.append((b, 0, float("nan"), float("nan")))
    return rows


# ---------------------------------------------------------------------------
# assembled report


def evaluate_segmentation(
    prob_map: np.ndarray,
    true_mask: np.ndarray,
    num_classes: int = 3,
    pred_mask: Optional[np.ndarray] = None,
) -> tuple[ClassMetrics, ConfusionMatrix]:
    """Everything Table-style reporting needs, from one probability map.

    ``pred_mask`` substitutes a decision rule other than the arg-max (for
    instance soft-tissue thresholding); AUC always comes from the raw
    probabilities, everything else from the assignment being scored.
    """
    probs = _flat_probs(prob_map)
    if probs.shape[1] != num_classes:
        raise DimensionError(
            f"probability map has {probs.shape[1]} classes, expected {num_classes}"
        )
    if pred_mask is None:
        pred = probs.argmax(axis=1)
    else:
        pred = _flat_labels(pred_mask, num_classes, "prediction")
        if pred.size != probs.shape[0]:
            raise DimensionError(
                f"prediction covers {pred.size} pixels, "
                f"probability map {probs.shape[0]}"
            )
    true = _flat_labels(true_mask, num_classes, "truth")
    cm = confusion(pred, true, num_classes)
    metrics = per_class_metrics(cm)

    auc = np.zeros(num_classes)
    conf = np.zeros(num_classes)
    for k in range(num_classes):
        try:
            _, auc[k] = roc_auc(prob_map, true_mask, k)
        except UndefinedMetricError:
            warnings.warn(f"AUC undefined for class {k}; reporting 0", stacklevel=2)
            auc[k] = 0.0
        try:
            conf[k] = confidence(prob_map, pred.reshape(np.asarray(true_mask).shape), k)
        except UndefinedMetricError:
            warnings.warn(f"confidence undefined for class {k}; reporting 0", stacklevel=2)
            conf[k] = 0.0
    metrics.auc = auc
    metrics.confidence = conf
    return metrics, cm


def metrics_report_csv(metrics: ClassMetrics, path, class_names=LABEL_NAMES) -> None:
    """CSV report: one row per class plus the weighted-average row."""
    gaps, weighted_gap = calibration_gap(metrics)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["class", "support", "accuracy", "precision", "f1", "auc",
             "confidence", "calibration_gap"]
        )
        for k, name in enumerate(class_names):
            writer.writerow(
                [name, int(metrics.support[k]), repr(float(metrics.accuracy[k])),
                 repr(float(metrics.precision[k])), repr(float(metrics.f1[k])),
                 repr(float(metrics.auc[k])), repr(float(metrics.confidence[k])),
                 repr(float(gaps[k]))]
            )
        writer.writerow(
            ["weighted average", int(metrics.support.sum()),
             repr(metrics.weighted("accuracy")), repr(metrics.weighted("precision")),
             repr(metrics.weighted("f1")), repr(metrics.weighted("auc")),
             repr(metrics.weighted("confidence")), repr(weighted_gap)]
        )


def roc_points_csv(curve: RocCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "fpr", "tpr"])
        for threshold, fpr, tpr in zip(curve.thresholds, curve.fpr, curve.tpr):
            writer.writerow([repr(float(threshold)), repr(float(fpr)), repr(float(tpr))])


def reliability_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin", "count", "mean_confidence", "mean_accuracy"])
        for b, count, conf, acc in rows:
            writer.writerow(
                [b, count,
                 "" if np.isnan(conf) else repr(conf),
                 "" if np.isnan(acc) else repr(acc)]
            )


def render_mask_png(mask: np.ndarray, path) -> None:
    """Write a label mask as a palette PNG using the three-colour scheme."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise DimensionError(f"mask must be 2-D, got ndim={arr.ndim}")
    bad = np.setdiff1d(np.unique(arr), np.arange(len(MASK_PALETTE)))
    if bad.size:
        raise LabelDomainError(
            f"mask contains labels without palette entries: {bad.tolist()}"
        )
    image = Image.fromarray(arr.astype(np.uint8), mode="P")
    palette = [component for colour in MASK_PALETTE for component in colour]
    palette += [0] * (768 - len(palette))
    image.putpalette(palette)
    image.save(path, format="PNG")
