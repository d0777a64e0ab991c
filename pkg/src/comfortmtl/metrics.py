"""Confusion matrices and per-class / macro precision, recall and F1."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true class indices, columns predicted ones."""

    task: str
    counts: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise ValueError("confusion matrices differ in shape")
        return ConfusionMatrix(self.task, self.counts + other.counts)

    def to_list(self) -> list[list[int]]:
        return self.counts.tolist()


def confusion(truth, pred, n_classes: int, task: str = "") -> ConfusionMatrix:
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    if truth.shape != pred.shape:
        raise ValueError(f"length mismatch: {len(truth)} truths vs {len(pred)} predictions")
    if len(truth) and (truth.min() < 0 or pred.min() < 0 or truth.max() >= n_classes or pred.max() >= n_classes):
        raise ValueError("class index out of range")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (truth, pred), 1)
    return ConfusionMatrix(task, counts)


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean; 0 when both are 0."""
    s = precision + recall
    return 0.0 if s == 0 else 2.0 * precision * recall / s


def _safe_div(num, den):
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


@dataclass(frozen=True)
class ClassMetrics:
    task: str
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    confusion: ConfusionMatrix

    def headline(self, averaging: str = "macro") -> tuple[float, float, float]:
        if averaging == "macro":
            return self.macro_precision, self.macro_recall, self.macro_f1
        if averaging == "weighted":
            return self.weighted_precision, self.weighted_recall, self.weighted_f1
        raise ValueError(f"unknown averaging mode {averaging!r}")

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
            "support": self.support.tolist(),
            "macro": {"precision": self.macro_precision, "recall": self.macro_recall, "f1": self.macro_f1},
            "weighted": {"precision": self.weighted_precision, "recall": self.weighted_recall,
                         "f1": self.weighted_f1},
            "confusion": self.confusion.to_list(),
        }


def macro_metrics(cm: ConfusionMatrix) -> ClassMetrics:
    """Per-class and averaged scores from a confusion matrix (0/0 counts as 0)."""
    c = cm.counts.astype(float)
    tp = np.diag(c)
    col = c.sum(axis=0)
    row = c.sum(axis=1)
    precision = _safe_div(tp, col)
    recall = _safe_div(tp, row)
    f1 = np.array([f1_score(p, r) for p, r in zip(precision, recall)])
    total = c.sum()
    support = row.astype(np.int64)
    wts = row / total if total > 0 else np.zeros_like(row)
    return ClassMetrics(
        task=cm.task,
        accuracy=float(tp.sum() / total) if total > 0 else 0.0,
        precision=precision,
        recall=recall,
        f1=f1,
        support=support,
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        weighted_precision=float(np.dot(wts, precision)),
        weighted_recall=float(np.dot(wts, recall)),
        weighted_f1=float(np.dot(wts, f1)),
        confusion=cm,
    )
