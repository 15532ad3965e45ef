"""Evaluation metrics: confusion matrices, macro scores, pairwise angles.

All averaged metrics are macro (unweighted over classes), which is the only
averaging that gives minority classes equal voice. Any zero-denominator
per-class score is defined as 0. Percentages throughout.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError


@dataclass
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class_precision: np.ndarray
    per_class_recall: np.ndarray
    per_class_f1: np.ndarray

    def as_dict(self):
        return {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "per_class_precision": [float(v) for v in self.per_class_precision],
            "per_class_recall": [float(v) for v in self.per_class_recall],
            "per_class_f1": [float(v) for v in self.per_class_f1],
        }


def confusion_matrix(y_true, y_pred, n_classes):
    """Counts with rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ParameterError("prediction/target length mismatch")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _safe_div(num, den):
    return np.where(den > 0, num / np.maximum(den, 1), 0.0)


def metrics_from_confusion(cm):
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total == 0:
        raise ParameterError("empty confusion matrix")
    tp = np.diag(cm)
    precision = _safe_div(tp, cm.sum(axis=0))
    recall = _safe_div(tp, cm.sum(axis=1))
    f1 = _safe_div(2.0 * precision * recall, precision + recall)
    return MetricsReport(
        accuracy=float(tp.sum() / total * 100.0),
        macro_precision=float(precision.mean() * 100.0),
        macro_recall=float(recall.mean() * 100.0),
        macro_f1=float(f1.mean() * 100.0),
        per_class_precision=precision * 100.0,
        per_class_recall=recall * 100.0,
        per_class_f1=f1 * 100.0,
    )


def mean_report(reports):
    """Unweighted mean of fold-level reports, field by field."""
    if not reports:
        raise ParameterError("no reports to aggregate")
    return MetricsReport(
        accuracy=float(np.mean([r.accuracy for r in reports])),
        macro_precision=float(np.mean([r.macro_precision for r in reports])),
        macro_recall=float(np.mean([r.macro_recall for r in reports])),
        macro_f1=float(np.mean([r.macro_f1 for r in reports])),
        per_class_precision=np.mean([r.per_class_precision for r in reports], axis=0),
        per_class_recall=np.mean([r.per_class_recall for r in reports], axis=0),
        per_class_f1=np.mean([r.per_class_f1 for r in reports], axis=0),
    )


@dataclass
class AngleReport:
    """Pairwise angles (degrees) between classifier weight columns."""

    angles: np.ndarray  # (M, M), symmetric, zero diagonal
    min_off_diagonal: float
    max_off_diagonal: float
    spread: float

    def as_dict(self):
        return {
            "min_off_diagonal": self.min_off_diagonal,
            "max_off_diagonal": self.max_off_diagonal,
            "spread": self.spread,
        }


def pairwise_angles(weight_columns):
    """Angle matrix between the columns of a (dim, M) weight matrix."""
    w = np.asarray(weight_columns, dtype=np.float64)
    norms = np.linalg.norm(w, axis=0)
    if np.any(norms == 0):
        raise ParameterError("zero-norm weight column has no direction")
    unit = w / norms[None, :]
    cos = np.clip(unit.T @ unit, -1.0, 1.0)
    angles = np.degrees(np.arccos(cos))
    np.fill_diagonal(angles, 0.0)
    off = angles[~np.eye(angles.shape[0], dtype=bool)]
    return AngleReport(
        angles=angles,
        min_off_diagonal=float(off.min()),
        max_off_diagonal=float(off.max()),
        spread=float(off.max() - off.min()),
    )
