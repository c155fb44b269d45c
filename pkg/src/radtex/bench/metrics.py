"""Ranking and classification metrics plus the result-row type."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
from scipy import stats


class UndefinedMetricError(ValueError):
    pass


def _binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary")
    return s, y.astype(bool)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: share of (positive, negative) pairs ranked correctly, ties count ½."""
    s, y = _binary(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = stats.rankdata(s)
    wins = ranks[y].sum() - n_pos * (n_pos + 1) / 2
    return float(wins / (n_pos * n_neg))


def aucpr(scores, labels) -> float:
    """Average precision: mean over positives of precision at their rank.

    Ranking is by descending score; equal scores keep input order.  The sum
    is exact, so the result is the correctly rounded value.
    """
    s, y = _binary(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    cum = np.cumsum(hits)
    ranks = np.arange(1, len(s) + 1)
    total = sum((Fraction(int(c), int(r)) for c, r in zip(cum[hits], ranks[hits])), Fraction(0))
    return float(total / n_pos)


def macro_f1(predictions, labels, n_classes: int) -> float:
    """Unweighted mean per-class F1; a class absent from both sides scores 0."""
    p = np.asarray(predictions).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    scores = []
    for c in range(n_classes):
        tp = int(np.sum((p == c) & (y == c)))
        fp = int(np.sum((p == c) & (y != c)))
        fn = int(np.sum((p != c) & (y == c)))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def mean_ci(values, level: float = 0.95) -> tuple[float, float]:
    """Sample mean and Student-t half-width (n−1 dof, sample standard deviation)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ValueError("a confidence interval needs at least two values")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    t = stats.t.ppf(0.5 + level / 2, df=v.size - 1)
    return float(v.mean()), float(t * v.std(ddof=1) / math.sqrt(v.size))


@dataclass
class MetricRecord:
    task: str
    mode: str
    pretrain_fraction: float
    n_train: int | str
    trial: int
    auc: float
    aucpr: float
    macro_f1: float | None = None
    seed: int = 0
    per_class: dict[str, dict[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("auc", "aucpr", "macro_f1"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def binary_task_metrics(scores: np.ndarray, labels: np.ndarray, names) -> tuple[float, float, dict]:
    """Per-column AUC/AP for a multi-output binary task and their plain averages."""
    per = {}
    for j, name in enumerate(names):
        col = labels[:, j]
        if col.min() == col.max():
            continue
        per[name] = {"auc": auc(scores[:, j], col), "aucpr": aucpr(scores[:, j], col)}
    if not per:
        raise UndefinedMetricError("no output column has both classes in the evaluation split")
    return (float(np.mean([m["auc"] for m in per.values()])),
            float(np.mean([m["aucpr"] for m in per.values()])), per)


def multiclass_task_metrics(logits: np.ndarray, labels: np.ndarray, n_classes: int) -> tuple[float, float, float, dict]:
    """One-vs-rest AUC/AP averaged over classes present, plus macro-F1 of the argmax."""
    z = logits - logits.max(axis=1, keepdims=True)
    prob = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    onehot = (labels[:, None] == np.arange(n_classes)[None]).astype(int)
    a, ap, per = binary_task_metrics(prob, onehot, [f"grade{c}" for c in range(n_classes)])
    return a, ap, macro_f1(logits.argmax(axis=1), labels, n_classes), per
