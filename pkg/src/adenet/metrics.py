"""Binary classification metrics with damaged (label 1) as the positive class.

Precision, recall and F1 are macro averages: the unweighted mean over the
damaged and undamaged classes. Undefined ratios (0/0) count as 0.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields

import numpy as np

REPORT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ConfusionMatrix2:
    tp: int
    fn: int
    fp: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fn, self.fp, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self):
        return self.tp + self.fn + self.fp + self.tn

    def __add__(self, other):
        return ConfusionMatrix2(self.tp + other.tp, self.fn + other.fn,
                                self.fp + other.fp, self.tn + other.tn)

    def to_dict(self):
        return asdict(self)


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    roc_auc: float | None
    fn_rate: float
    precision_damaged: float
    recall_damaged: float
    f1_damaged: float
    precision_undamaged: float
    recall_undamaged: float
    f1_undamaged: float
    support_damaged: float
    support_undamaged: float

    def to_dict(self):
        return {"schema_version": REPORT_SCHEMA_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, d):
        return cls(**{f.name: d[f.name] for f in fields(cls)})


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray


def _div(a, b):
    return a / b if b else 0.0


def _f1(p, r):
    return _div(2 * p * r, p + r)


def confusion(labels, predictions):
    y = np.asarray(labels)
    p = np.asarray(predictions)
    if y.shape != p.shape:
        raise ValueError(f"length mismatch: {y.size} labels vs {p.size} predictions")
    if y.size == 0:
        raise ValueError("confusion of empty input")
    if not (np.isin(y, (0, 1)).all() and np.isin(p, (0, 1)).all()):
        raise ValueError("labels and predictions must be 0 or 1")
    return ConfusionMatrix2(
        tp=int(((y == 1) & (p == 1)).sum()), fn=int(((y == 1) & (p == 0)).sum()),
        fp=int(((y == 0) & (p == 1)).sum()), tn=int(((y == 0) & (p == 0)).sum()),
    )


def false_negative_rate(m: ConfusionMatrix2, denominator="total"):
    """Missed damaged insulators as a share of all samples (default) or of
    damaged samples (``denominator="positives"``, the miss rate)."""
    if denominator == "total":
        d = m.total
    elif denominator == "positives":
        d = m.tp + m.fn
    else:
        raise ValueError(f"unknown denominator {denominator!r}")
    if d <= 0:
        raise ValueError("false_negative_rate: zero denominator")
    return m.fn / d


def metrics_from_confusion(m: ConfusionMatrix2, roc_auc=None):
    if m.total <= 0:
        raise ValueError("metrics of an empty confusion matrix")
    p1, r1 = _div(m.tp, m.tp + m.fp), _div(m.tp, m.tp + m.fn)
    p0, r0 = _div(m.tn, m.tn + m.fn), _div(m.tn, m.tn + m.fp)
    f1, f0 = _f1(p1, r1), _f1(p0, r0)
    return MetricsReport(
        accuracy=(m.tp + m.tn) / m.total,
        precision=(p1 + p0) / 2, recall=(r1 + r0) / 2, f1=(f1 + f0) / 2,
        roc_auc=roc_auc, fn_rate=m.fn / m.total,
        precision_damaged=p1, recall_damaged=r1, f1_damaged=f1,
        precision_undamaged=p0, recall_undamaged=r0, f1_undamaged=f0,
        support_damaged=m.tp + m.fn, support_undamaged=m.tn + m.fp,
    )


def roc_curve(scores, labels):
    """Full threshold sweep, one point per distinct score (descending).

    Returned as integer counts ``(fp, tp, n_neg, n_pos)`` so callers can
    integrate exactly before dividing.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y == 1)
    fp = np.cumsum(y == 0)
    # last index of each block of tied scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.r_[0, tp[ends]].astype(np.int64)
    fp = np.r_[0, fp[ends]].astype(np.int64)
    return fp, tp, n_neg, n_pos


def roc_auc(scores, labels):
    """Trapezoidal AUC over every distinct threshold, plus the curve.

    The trapezoid sum is accumulated in integers (twice the area in
    count units), so the result is exactly the Mann-Whitney statistic with
    ties counted as one half.
    """
    fp, tp, n_neg, n_pos = roc_curve(scores, labels)
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    auc = twice_area / (2 * n_pos * n_neg)
    return auc, RocCurve(fp / n_neg, tp / n_pos)


def aggregate_folds(reports):
    """Fieldwise mean of fold reports. ``roc_auc`` stays None if any fold lacks it."""
    if not reports:
        raise ValueError("aggregate_folds: no reports")
    out = {}
    for f in fields(MetricsReport):
        vals = [getattr(r, f.name) for r in reports]
        if any(v is None for v in vals):
            out[f.name] = None
        else:
            out[f.name] = float(np.mean(vals))
    return MetricsReport(**out)


def evaluate(labels, scores, threshold=0.5, predictions=None):
    """Report for damaged-class scores: hard labels at ``threshold`` plus AUC.

    Pass ``predictions`` when a classifier has its own decision rule; the
    scores are then used for the AUC only.
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if predictions is None:
        predictions = (scores >= threshold).astype(int)
    cm = confusion(labels, np.asarray(predictions))
    auc = roc_auc(scores, labels)[0] if len(set(labels.tolist())) == 2 else None
    return metrics_from_confusion(cm, auc), cm


def emit_report(obj, path, fmt="json"):
    """Write a MetricsReport (json or one-row csv) or a RocCurve (fpr,tpr csv)."""
    if isinstance(obj, RocCurve):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["fpr", "tpr"])
            for a, b in zip(obj.fpr, obj.tpr):
                wr.writerow([repr(float(a)), repr(float(b))])
        return
    d = obj.to_dict()
    if fmt == "json":
        with open(path, "w") as fh:
            json.dump(d, fh, indent=2)
            fh.write("\n")
    elif fmt == "csv":
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(list(d))
            wr.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in d.values()])
    else:
        raise ValueError(f"unknown format {fmt!r}")


def load_report(path):
    with open(path) as fh:
        return MetricsReport.from_dict(json.load(fh))
