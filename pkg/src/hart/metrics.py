"""Classification metrics computed from a confusion matrix."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class ClassificationReport:
    macro_f1: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]
    confusion: list[list[int]]  # rows: true class, columns: predicted class

    def to_dict(self) -> dict:
        return asdict(self)


def confusion_matrix(predictions, labels, num_classes: int) -> np.ndarray:
    pred = np.asarray(predictions, dtype=np.int64).ravel()
    true = np.asarray(labels, dtype=np.int64).ravel()
    if pred.shape != true.shape:
        raise ValueError(f"predictions ({pred.size}) and labels ({true.size}) differ in length")
    for name, arr in (("labels", true), ("predictions", pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} must lie in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def _safe_div(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.divide(a, b, out=np.zeros_like(a, dtype=np.float64), where=b > 0)


def classification_report(predictions, labels, num_classes: int) -> ClassificationReport:
    """Per-class precision/recall/F1 (0 where undefined) and their unweighted mean F1."""
    cm = confusion_matrix(predictions, labels, num_classes)
    tp = np.diag(cm).astype(np.float64)
    precision = _safe_div(tp, cm.sum(axis=0).astype(np.float64))
    recall = _safe_div(tp, cm.sum(axis=1).astype(np.float64))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return ClassificationReport(
        macro_f1=float(f1.mean()),
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        support=cm.sum(axis=1).tolist(),
        confusion=cm.tolist(),
    )


def macro_f1(predictions, labels, num_classes: int) -> float:
    return classification_report(predictions, labels, num_classes).macro_f1


def argmax_lowest(scores) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest class index."""
    return np.asarray(scores).argmax(axis=-1)
