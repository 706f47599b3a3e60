"""Binary classification metrics with poisonous (label 1) as the positive class.

Any metric whose denominator is zero is reported as 0 rather than NaN, so
every report row is fully populated.
"""
from __future__ import annotations

import csv
import io
from decimal import ROUND_HALF_UP, Decimal
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from .layers import softmax

COLUMNS = ("Model", "Accuracy", "AUC", "Precision", "Recall", "F1")


@dataclass
class PredictionSet:
    labels: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if self.labels.shape != self.scores.shape:
            raise ValueError(f"{self.labels.size} labels but {self.scores.size} scores")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        if np.any((self.labels != 0) & (self.labels != 1)):
            raise ValueError("labels must be 0 or 1")

    @property
    def predicted(self) -> np.ndarray:
        # score exactly 0.5 counts as poisonous
        return (self.scores >= 0.5).astype(np.int64)

    @classmethod
    def from_logits(cls, labels, logits) -> "PredictionSet":
        return cls(labels, softmax(np.asarray(logits, dtype=np.float64))[:, 1])


@dataclass
class MetricsReport:
    accuracy: float
    auc: float
    precision: float
    recall: float
    f1: float
    n: int = 0
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def row(self) -> tuple:
        return self.accuracy, self.auc, self.precision, self.recall, self.f1


def confusion(p: PredictionSet) -> tuple[int, int, int, int]:
    """``(TP, FP, TN, FN)``."""
    if p.labels.size == 0:
        raise ValueError("confusion counts of an empty prediction set")
    y, yhat = p.labels, p.predicted
    tp = int(np.sum((y == 1) & (yhat == 1)))
    fp = int(np.sum((y == 0) & (yhat == 1)))
    tn = int(np.sum((y == 0) & (yhat == 0)))
    fn = int(np.sum((y == 1) & (yhat == 0)))
    return tp, fp, tn, fn


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def classification_metrics(counts) -> tuple[float, float, float, float]:
    """Accuracy, precision, recall and F1 from confusion counts."""
    tp, fp, tn, fn = counts
    total = tp + fp + tn + fn
    if total <= 0:
        raise ValueError("no instances to score")
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * precision * recall, precision + recall)
    return (tp + tn) / total, precision, recall, f1


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(p: PredictionSet) -> float:
    """Area under the ROC curve via the rank-sum form of the Mann-Whitney U statistic."""
    pos = p.labels == 1
    n_pos = int(pos.sum())
    n_neg = p.labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined for single-class labels")
    ranks = _midranks(p.scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def evaluate_predictions(p: PredictionSet) -> MetricsReport:
    counts = confusion(p)
    acc, prec, rec, f1 = classification_metrics(counts)
    tp, fp, tn, fn = counts
    return MetricsReport(acc, auc(p), prec, rec, f1, int(p.labels.size), tp, fp, tn, fn)


def mean_report(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Elementwise arithmetic mean; confusion counts are summed."""
    if not reports:
        raise ValueError("no reports to average")
    k = len(reports)
    return MetricsReport(
        *(sum(r.row()[i] for r in reports) / k for i in range(5)),
        n=sum(r.n for r in reports),
        tp=sum(r.tp for r in reports), fp=sum(r.fp for r in reports),
        tn=sum(r.tn for r in reports), fn=sum(r.fn for r in reports),
    )


def _three_places(v: float) -> str:
    # round the shortest decimal form half-up, so 0.7555 prints as 0.756
    return str(Decimal(repr(float(v))).quantize(Decimal("0.001"), rounding=ROUND_HALF_UP))


def emit_report(named: Mapping[str, MetricsReport]) -> str:
    """Table-style CSV: one row per model, three decimals."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for name, r in named.items():
        w.writerow([name, *(_three_places(v) for v in r.row())])
    return buf.getvalue()


DETAIL_FIELDS = [f.name for f in fields(MetricsReport)]


def metrics_csv(named: Mapping[str, MetricsReport]) -> str:
    """Full-precision metrics file written by ``evaluate``; input to ``report``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", *DETAIL_FIELDS])
    for name, r in named.items():
        d = asdict(r)
        w.writerow([name, *(repr(d[k]) for k in DETAIL_FIELDS)])
    return buf.getvalue()


def read_metrics_csv(text: str) -> dict:
    out = {}
    for row in csv.DictReader(io.StringIO(text)):
        kwargs = {k: (int(row[k]) if k in ("n", "tp", "fp", "tn", "fn") else float(row[k]))
                  for k in DETAIL_FIELDS}
        out[row["model"]] = MetricsReport(**kwargs)
    return out
