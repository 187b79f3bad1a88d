import csv
import json
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adenet import metrics
from adenet.metrics import ConfusionMatrix2

from oracles import mann_whitney_auc


def test_confusion_examples():
    assert metrics.confusion([1, 1, 0, 0], [1, 0, 0, 1]) == ConfusionMatrix2(1, 1, 1, 1)
    cm = metrics.confusion([1, 0, 1, 0], [1, 0, 1, 0])
    assert cm.fn == 0 and cm.fp == 0
    cm = metrics.confusion([1, 0, 1, 0, 0], [0] * 5)
    assert cm.tp == 0 and cm.fp == 0


@pytest.mark.parametrize("labels,preds", [([1, 0], [1]), ([], []), ([2, 0], [1, 0])])
def test_confusion_errors(labels, preds):
    with pytest.raises(ValueError):
        metrics.confusion(labels, preds)


def _exact_macro(tp, fn, fp, tn):
    # rational-arithmetic oracle for the macro metrics
    F = Fraction
    p1, r1 = F(tp, tp + fp), F(tp, tp + fn)
    p0, r0 = F(tn, tn + fn), F(tn, tn + fp)
    f1 = 2 * p1 * r1 / (p1 + r1)
    f0 = 2 * p0 * r0 / (p0 + r0)
    return {"accuracy": F(tp + tn, tp + fn + fp + tn), "precision": (p1 + p0) / 2,
            "recall": (r1 + r0) / 2, "f1": (f1 + f0) / 2}


@pytest.mark.parametrize("counts,expected", [
    # 20-epoch matrix; hand-computed to four places
    ((1026, 424, 213, 3962), {"accuracy": 0.8868, "precision": 0.8657, "recall": 0.8283, "f1": 0.8444}),
    # 10-epoch matrix; exact macro F1 is 0.81261
    ((947, 503, 257, 3918), {"accuracy": 0.8649, "recall": 0.7958, "f1": 0.8126}),
])
def test_published_confusions(counts, expected):
    r = metrics.metrics_from_confusion(ConfusionMatrix2(*counts))
    exact = _exact_macro(*counts)
    for k, v in expected.items():
        assert getattr(r, k) == pytest.approx(v, abs=5e-5)
        assert getattr(r, k) == pytest.approx(float(exact[k]), abs=1e-12)


def test_published_rows_within_two_points():
    r20 = metrics.metrics_from_confusion(ConfusionMatrix2(1026, 424, 213, 3962))
    for got, row in zip((r20.accuracy, r20.precision, r20.recall, r20.f1), (0.89, 0.87, 0.83, 0.84)):
        assert abs(got - row) <= 0.02
    r10 = metrics.metrics_from_confusion(ConfusionMatrix2(947, 503, 257, 3918))
    for got, row in zip((r10.accuracy, r10.f1, r10.recall), (0.86, 0.81, 0.80)):
        assert abs(got - row) <= 0.02


def test_perfect_matrix():
    r = metrics.metrics_from_confusion(ConfusionMatrix2(10, 0, 0, 20))
    for k in ("accuracy", "precision", "recall", "f1", "f1_damaged", "f1_undamaged"):
        assert getattr(r, k) == 1.0
    assert r.fn_rate == 0


def test_zero_over_zero_is_zero():
    r = metrics.metrics_from_confusion(ConfusionMatrix2(0, 5, 0, 5))
    assert r.precision_damaged == 0 and r.f1_damaged == 0
    assert r.precision == pytest.approx(0.25)
    with pytest.raises(ValueError):
        metrics.metrics_from_confusion(ConfusionMatrix2(0, 0, 0, 0))
    with pytest.raises(ValueError):
        ConfusionMatrix2(-1, 0, 0, 0)


def test_fn_rate():
    cm = ConfusionMatrix2(1026, 424, 213, 3962)
    assert metrics.false_negative_rate(cm) == pytest.approx(424 / 5625)
    assert round(metrics.false_negative_rate(cm), 4) == 0.0754
    assert metrics.false_negative_rate(ConfusionMatrix2(4, 0, 0, 6)) == 0
    missed = ConfusionMatrix2(0, 3, 0, 7)
    assert metrics.false_negative_rate(missed) == pytest.approx(0.3)
    assert metrics.false_negative_rate(missed, "positives") == 1.0
    with pytest.raises(ValueError):
        metrics.false_negative_rate(ConfusionMatrix2(0, 0, 0, 5), "positives")


@settings(max_examples=100, deadline=None)
@given(st.tuples(*[st.integers(0, 200)] * 4).filter(lambda c: sum(c) > 0), st.integers(1, 50))
def test_scale_invariance(counts, k):
    a = metrics.metrics_from_confusion(ConfusionMatrix2(*counts))
    b = metrics.metrics_from_confusion(ConfusionMatrix2(*(k * c for c in counts)))
    for name in ("accuracy", "precision", "recall", "f1", "fn_rate"):
        assert getattr(a, name) == pytest.approx(getattr(b, name), abs=1e-12)
    for v in a.to_dict().values():
        if isinstance(v, float) and v <= 1:
            assert 0 <= v <= 1
    assert a.f1 == pytest.approx((a.f1_damaged + a.f1_undamaged) / 2)


def test_auc_examples():
    assert metrics.roc_auc([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0])[0] == 1.0
    assert metrics.roc_auc([0.4] * 6, [1, 0, 1, 0, 0, 1])[0] == 0.5
    with pytest.raises(ValueError):
        metrics.roc_auc([0.1, 0.2], [1, 1])


def test_auc_matches_pairwise_on_50_pairs():
    r = np.random.default_rng(50)
    scores = np.round(r.random(50), 2)      # rounding forces ties
    labels = r.integers(0, 2, 50)
    num, den = mann_whitney_auc(scores, labels)
    assert metrics.roc_auc(scores, labels)[0] == num / den


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 8), st.integers(0, 1)), min_size=2, max_size=40)
       .filter(lambda p: len({l for _, l in p}) == 2))
def test_auc_properties(pairs):
    scores = np.array([s / 8 for s, _ in pairs])
    labels = np.array([l for _, l in pairs])
    auc, curve = metrics.roc_auc(scores, labels)
    num, den = mann_whitney_auc(scores, labels)
    assert auc == num / den
    assert auc + metrics.roc_auc(scores, 1 - labels)[0] == 1.0
    assert (curve.fpr[0], curve.tpr[0]) == (0, 0) and (curve.fpr[-1], curve.tpr[-1]) == (1, 1)
    assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=2, max_size=40)
       .filter(lambda p: len({l for _, l in p}) == 2))
def test_hard_score_auc_is_macro_recall(pairs):
    preds = np.array([p for p, _ in pairs])
    labels = np.array([l for _, l in pairs])
    r = metrics.metrics_from_confusion(metrics.confusion(labels, preds))
    assert metrics.roc_auc(preds.astype(float), labels)[0] == pytest.approx(r.recall, abs=1e-12)


def _report(acc):
    base = metrics.metrics_from_confusion(ConfusionMatrix2(8, 2, 1, 9), roc_auc=0.9)
    return replace(base, accuracy=acc)


def test_aggregate():
    a = _report(0.8)
    assert metrics.aggregate_folds([a, a]) == a
    assert metrics.aggregate_folds([_report(0.8), _report(0.9)]).accuracy == pytest.approx(0.85)
    with pytest.raises(ValueError):
        metrics.aggregate_folds([])
    no_auc = metrics.metrics_from_confusion(ConfusionMatrix2(1, 1, 1, 1))
    assert metrics.aggregate_folds([a, no_auc]).roc_auc is None


def test_emit_round_trip(tmp_path):
    r = _report(0.875)
    metrics.emit_report(r, tmp_path / "r.json")
    assert metrics.load_report(tmp_path / "r.json") == r
    assert json.loads((tmp_path / "r.json").read_text())["schema_version"] == metrics.REPORT_SCHEMA_VERSION
    metrics.emit_report(r, tmp_path / "r.csv", "csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert len(rows) == 2 and rows[0][0] == "schema_version"
    with pytest.raises(ValueError):
        metrics.emit_report(r, tmp_path / "r.x", "xml")


def test_roc_csv(tmp_path):
    _, curve = metrics.roc_auc([0.1, 0.7, 0.7, 0.3, 0.9], [0, 1, 0, 0, 1])
    metrics.emit_report(curve, tmp_path / "roc.csv")
    rows = list(csv.reader(open(tmp_path / "roc.csv")))
    assert rows[0] == ["fpr", "tpr"]
    vals = np.array(rows[1:], dtype=float)
    assert np.all(np.diff(vals, axis=0) >= 0)


def test_evaluate_with_own_predictions():
    scores = [0.5, 0.5, 0.2, 0.9]
    r, cm = metrics.evaluate([1, 0, 0, 1], scores)
    assert cm == ConfusionMatrix2(2, 0, 1, 1)
    r, cm = metrics.evaluate([1, 0, 0, 1], scores, predictions=[0, 0, 0, 1])
    assert cm == ConfusionMatrix2(1, 1, 0, 2)
    assert r.roc_auc == pytest.approx(metrics.roc_auc(scores, [1, 0, 0, 1])[0])
