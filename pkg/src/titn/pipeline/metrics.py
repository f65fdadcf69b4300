"""Top-k accuracy and macro precision/recall/F1."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

CSV_HEADER = ["epoch", "train_loss", "top1", "top5", "precision", "recall", "f1", "lr", "seconds"]


@dataclass
class MetricsRecord:
    epoch: int = 0
    train_loss: float = float("nan")
    top1: float = 0.0
    top5: float = 0.0
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    lr: float = 0.0
    seconds: float = 0.0

    def row(self) -> list:
        return [repr(getattr(self, name)) if isinstance(getattr(self, name), float)
                else str(getattr(self, name)) for name in CSV_HEADER]

    def as_dict(self) -> dict:
        return asdict(self)


def rank_of_label(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """0-based rank of each true label when classes are sorted by
    descending score, ties broken toward the lower class index."""
    scores = np.asarray(scores)
    labels = np.asarray(labels, dtype=np.int64)
    true = scores[np.arange(len(labels)), labels][:, None]
    idx = np.arange(scores.shape[1])[None, :]
    ahead = (scores > true) | ((scores == true) & (idx < labels[:, None]))
    return ahead.sum(axis=1)


def topk_accuracy(scores: np.ndarray, labels: np.ndarray, k: int) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(rank_of_label(scores, labels) < k))


def predictions(scores: np.ndarray) -> np.ndarray:
    return np.argmax(scores, axis=1)


def macro_prf(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> tuple[float, float, float]:
    """Macro-averaged precision, recall and F1 over all ``num_classes``.

    A class with no predictions has precision 0, a class absent from
    ``labels`` has recall 0, and F1 is 0 when precision + recall is 0;
    every class counts in the average. Averages use ``math.fsum`` so the
    result is the correctly rounded mean, independent of summation order.
    """
    pred = np.asarray(pred, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    tp = np.bincount(labels[pred == labels], minlength=num_classes).astype(np.float64)
    predicted = np.bincount(pred, minlength=num_classes).astype(np.float64)
    actual = np.bincount(labels, minlength=num_classes).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(actual > 0, tp / actual, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    def avg(v):
        return math.fsum(v.tolist()) / num_classes

    return avg(precision), avg(recall), avg(f1)


def classification_metrics(scores: np.ndarray, labels: np.ndarray, num_classes: int) -> dict:
    p, r, f = macro_prf(predictions(scores), labels, num_classes)
    return {
        "top1": topk_accuracy(scores, labels, 1),
        "top5": topk_accuracy(scores, labels, 5),
        "precision": p,
        "recall": r,
        "f1": f,
    }
