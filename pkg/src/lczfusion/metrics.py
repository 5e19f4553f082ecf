"""Classification metrics over a confusion matrix.

Conventions: confusion rows index the true class, columns the predicted one.
A per-class statistic whose denominator is zero is reported as None (null in
JSON) rather than zero, and averages skip undefined entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import BUILT_CLASSES, NATURAL_CLASSES, NUM_LCZ_CLASSES
from .errors import DataError, DimensionError


def confusion_matrix(true_labels, pred_labels, num_classes: int) -> np.ndarray:
    t = np.asarray(true_labels).ravel()
    p = np.asarray(pred_labels).ravel()
    if t.shape != p.shape:
        raise DimensionError(
            f"{t.shape[0]} true labels vs {p.shape[0]} predictions"
        )
    if t.size == 0:
        raise DataError("cannot build a confusion matrix from zero samples")
    for name, arr in (("true", t), ("predicted", p)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise DataError(
                f"{name} labels outside [0, {num_classes}): "
                f"range {arr.min()}..{arr.max()}"
            )
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def overall_accuracy(cm: np.ndarray) -> float:
    total = cm.sum()
    return float(np.trace(cm) / total)


def _subset_accuracy(cm: np.ndarray, classes) -> float | None:
    classes = [c for c in classes if c < cm.shape[0]]
    if not classes:
        return None
    rows = cm[classes, :]
    total = rows.sum()
    if total == 0:
        return None
    correct = sum(int(cm[c, c]) for c in classes)
    return float(correct / total)


def cohens_kappa(cm: np.ndarray) -> float:
    total = cm.sum()
    p_o = np.trace(cm) / total
    p_e = float((cm.sum(axis=1) * cm.sum(axis=0)).sum()) / float(total) ** 2
    if p_e >= 1.0:
        # all mass in one class for both raters: perfect agreement scores 1
        return 1.0 if p_o == 1.0 else 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def per_class_stats(cm: np.ndarray) -> list[dict]:
    stats = []
    for c in range(cm.shape[0]):
        tp = float(cm[c, c])
        col = float(cm[:, c].sum())
        row = float(cm[c, :].sum())
        precision = tp / col if col > 0 else None
        recall = tp / row if row > 0 else None
        if precision is None or recall is None or precision + recall == 0:
            f1 = None
        else:
            f1 = 2.0 * precision * recall / (precision + recall)
        stats.append({
            "class": c,
            "support": int(row),
            "precision": precision,
            "recall": recall,
            "f1": f1,
        })
    return stats


def average_f1(stats: list[dict], weighted: bool = False) -> float | None:
    defined = [s for s in stats if s["f1"] is not None]
    if not defined:
        return None
    if weighted:
        total = sum(s["support"] for s in defined)
        if total == 0:
            return None
        return sum(s["f1"] * s["support"] for s in defined) / total
    return sum(s["f1"] for s in defined) / len(defined)


@dataclass
class MetricsReport:
    num_classes: int
    confusion: np.ndarray
    overall_accuracy: float
    built_accuracy: float | None     # classes 0..9
    natural_accuracy: float | None   # classes 10..16
    kappa: float
    per_class: list[dict]
    avg_f1: float | None
    avg_f1_weighted: float | None

    def to_json_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "confusion": self.confusion.tolist(),
            "overall_accuracy": self.overall_accuracy,
            "built_accuracy": self.built_accuracy,
            "natural_accuracy": self.natural_accuracy,
            "kappa": self.kappa,
            "per_class": self.per_class,
            "avg_f1": self.avg_f1,
            "avg_f1_weighted": self.avg_f1_weighted,
        }


def compute_metrics(true_labels, pred_labels,
                    num_classes: int = NUM_LCZ_CLASSES) -> MetricsReport:
    cm = confusion_matrix(true_labels, pred_labels, num_classes)
    stats = per_class_stats(cm)
    return MetricsReport(
        num_classes=num_classes,
        confusion=cm,
        overall_accuracy=overall_accuracy(cm),
        built_accuracy=_subset_accuracy(cm, BUILT_CLASSES),
        natural_accuracy=_subset_accuracy(cm, NATURAL_CLASSES),
        kappa=cohens_kappa(cm),
        per_class=stats,
        avg_f1=average_f1(stats),
        avg_f1_weighted=average_f1(stats, weighted=True),
    )
