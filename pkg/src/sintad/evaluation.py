"""Precision, recall and ROC/AUC over line-level detections."""

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np


class UndefinedMetricError(ValueError):
    """Raised when a metric has no defined value, e.g. recall without positives."""


def _prep(values, labels, mask):
    v = np.asarray(values)
    y = np.asarray(labels, dtype=bool)
    if v.shape != y.shape:
        raise ValueError(f"values {v.shape} and labels {y.shape} differ in shape")
    m = np.ones_like(y) if mask is None else np.asarray(mask, dtype=bool)
    return v[m], y[m]


@dataclass
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int


def confusion(flags, labels, mask=None) -> Confusion:
    f, y = _prep(np.asarray(flags, dtype=bool), labels, mask)
    return Confusion(int(np.sum(f & y)), int(np.sum(f & ~y)), int(np.sum(~f & ~y)), int(np.sum(~f & y)))


def precision_recall(flags, labels, mask=None) -> Tuple[Optional[float], float]:
    """``(precision, recall)`` over the masked lines.

    Precision is ``None`` when nothing is flagged. Recall without any labeled
    positive raises :class:`UndefinedMetricError`.
    """
    c = confusion(flags, labels, mask)
    if c.tp + c.fn == 0:
        raise UndefinedMetricError("recall is undefined: no positive labels among the evaluated lines")
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else None
    return precision, c.tp / (c.tp + c.fn)


@dataclass
class EvalReport:
    layer_id: Optional[int] = None
    precision: Optional[float] = None
    recall: Optional[float] = None
    fpr: List[float] = field(default_factory=list)
    tpr: List[float] = field(default_factory=list)
    thresholds: List[float] = field(default_factory=list)
    auc: Optional[float] = None
    confusion: Optional[Confusion] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def roc_curve(scores, labels, mask=None):
    """ROC points for thresholds swept over the distinct scores, highest first.

    A line is called positive when its score is ``>=`` the threshold, so tied
    scores enter together as a single step. Returns ``(fpr, tpr, thresholds)``
    with a leading ``(0, 0)`` point at threshold ``+inf``.
    """
    s, y = _prep(np.asarray(scores, dtype=np.float64), labels, mask)
    if np.isnan(s).any():
        raise ValueError("roc_curve: scores contain NaN")
    pos, neg = int(y.sum()), int((~y).sum())
    if pos == 0 or neg == 0:
        raise UndefinedMetricError(f"ROC needs both classes; got {pos} positives and {neg} negatives")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tps = np.cumsum(y)[last_of_group]
    fps = np.cumsum(~y)[last_of_group]
    fpr = np.r_[0.0, fps / neg]
    tpr = np.r_[0.0, tps / pos]
    thresholds = np.r_[np.inf, s[last_of_group]]
    return fpr, tpr, thresholds


def auc_trapezoid(fpr, tpr) -> float:
    fpr, tpr = np.asarray(fpr, dtype=np.float64), np.asarray(tpr, dtype=np.float64)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def roc_auc(scores, labels, mask=None, layer_id: Optional[int] = None) -> EvalReport:
    fpr, tpr, thr = roc_curve(scores, labels, mask)
    return EvalReport(layer_id=layer_id, fpr=fpr.tolist(), tpr=tpr.tolist(),
                      thresholds=[float(t) for t in thr], auc=auc_trapezoid(fpr, tpr))


def evaluate(scores, flags, labels, mask=None, layer_id: Optional[int] = None) -> EvalReport:
    """Full report for one layer: confusion counts, precision/recall at the
    given flags and the threshold-free ROC/AUC of ``scores``."""
    rep = roc_auc(scores, labels, mask, layer_id)
    rep.precision, rep.recall = precision_recall(flags, labels, mask)
    rep.confusion = confusion(flags, labels, mask)
    return rep
