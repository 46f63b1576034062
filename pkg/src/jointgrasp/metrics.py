"""Confusion matrices and global accuracy / macro recall / macro F1."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, columns: predicted class

    @property
    def L(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class MetricsReport:
    GA: float
    MRC: float
    MF1: float
    recall: list[float]
    precision: list[float]
    f1: list[float]
    support: list[int]
    task: str = "grasp"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def csv_row(self) -> str:
        return f"{self.task},{self.GA!r},{self.MRC!r},{self.MF1!r}"


def confusion_matrix(preds: Sequence[int], labels: Sequence[int], L: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise DimensionError(f"{preds.size} predictions vs {labels.size} labels")
    for name, arr in (("prediction", preds), ("label", labels)):
        bad = np.nonzero((arr < 0) | (arr >= L))[0]
        if bad.size:
            raise DimensionError(f"{name} {int(arr[bad[0]])} at position {int(bad[0])} outside [0, {L})")
    counts = np.zeros((L, L), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


def compute_metrics(cm: ConfusionMatrix | np.ndarray, task: str = "grasp") -> MetricsReport:
    """GA plus macro recall/F1 over classes that have at least one true sample.

    Precision with an empty predicted column is taken as 0.
    """
    c = np.asarray(cm.counts if isinstance(cm, ConfusionMatrix) else cm, dtype=np.float64)
    total = c.sum()
    if total <= 0:
        raise ContractError("metrics of an empty confusion matrix")
    tp = np.diag(c)
    support = c.sum(axis=1)
    predicted = c.sum(axis=0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    seen = support > 0
    return MetricsReport(
        GA=float(tp.sum() / total),
        MRC=float(recall[seen].mean()),
        MF1=float(f1[seen].mean()),
        recall=recall.tolist(),
        precision=precision.tolist(),
        f1=f1.tolist(),
        support=[int(s) for s in support],
        task=task,
    )


def evaluate(preds, labels, L: int, task: str = "grasp") -> MetricsReport:
    return compute_metrics(confusion_matrix(preds, labels, L), task=task)
