import csv
import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from msranet.errors import ContractError, DataError
from msranet.metrics import (
    accuracy,
    auc_scores,
    balanced_estimate,
    binary_auc,
    confusion_csv,
    confusion_matrix,
    evaluate_predictions,
    format_pm,
    prf_scores,
    report,
)
from oracles import brute_prf, trapezoid_auc


def test_confusion_examples(rng):
    assert np.array_equal(confusion_matrix([0, 1, 2], [0, 1, 2], 3), np.eye(3))
    assert confusion_matrix([0, 0], [1, 1], 2)[0, 1] == 2
    t, p = rng.integers(0, 4, 200), rng.integers(0, 4, 200)
    brute = np.zeros((4, 4), int)
    for a, b in zip(t, p):
        brute[a][b] += 1
    assert np.array_equal(confusion_matrix(t, p, 4), brute)
    with pytest.raises(DataError):
        confusion_matrix([0, 3], [0, 1], 3)
    with pytest.raises(DataError):
        confusion_matrix([0], [0, 1], 3)


def test_prf_examples():
    s = prf_scores(np.eye(3, dtype=int) * 4)
    assert (s.precision == 1).all() and (s.recall == 1).all() and (s.f1 == 1).all()
    # binary, positive class 1: TP=3 FP=1 FN=1 TN=5
    s = prf_scores(np.array([[5, 1], [1, 3]]))
    assert s.precision[1] == 0.75 and s.recall[1] == 0.75 and s.f1[1] == 0.75
    s = prf_scores(np.array([[3, 0], [2, 0]]))
    assert s.precision[1] == 0 and s.undefined[1] and not s.undefined[0]


def test_prf_and_accuracy_match_brute_force(rng):
    for _ in range(200):
        n = int(rng.integers(2, 7))
        cm = rng.integers(0, 6, (n, n))
        cm[0, 0] += 1
        s = prf_scores(cm)
        np.testing.assert_allclose(np.stack([s.precision, s.recall, s.f1], 1), brute_prf(cm.tolist()), atol=1e-12)
        recall_weighted = (s.recall * cm.sum(1)).sum() / cm.sum()
        assert accuracy(cm) == pytest.approx(recall_weighted, abs=1e-12)


def test_accuracy_examples():
    assert accuracy(np.eye(3)) == 1.0
    assert accuracy(np.array([[45, 3], [2, 50]])) == 0.95
    assert accuracy(np.array([[5, 3], [2, 90]])) == 0.95
    with pytest.raises(ContractError):
        accuracy(np.zeros((2, 2)))


def test_auc_examples():
    pos = np.array([True, True, False, False])
    assert binary_auc(np.array([0.9, 0.8, 0.2, 0.1]), pos) == 1.0
    assert binary_auc(np.full(4, 0.5), pos) == 0.5
    assert np.isnan(binary_auc(np.ones(3), np.ones(3, bool)))


@given(st.integers(2, 30), st.integers(0, 2**31))
def test_auc_matches_trapezoid_and_inverts(n, seed):
    r = np.random.default_rng(seed)
    pos = r.random(n) < 0.5
    pos[0], pos[1] = True, False
    scores = np.round(r.random(n), 1)  # coarse rounding forces ties
    a = binary_auc(scores, pos)
    assert abs(a - trapezoid_auc(scores, pos)) < 1e-9
    assert abs(binary_auc(-scores, pos) - (1 - a)) < 1e-12
    assert 0 <= a <= 1


def test_auc_scores_excludes_absent_class():
    probs = np.array([[0.7, 0.2, 0.1], [0.2, 0.7, 0.1], [0.6, 0.3, 0.1]])
    s = auc_scores([0, 1, 0], probs)
    assert s.excluded == [2] and s.macro == 1.0
    with pytest.raises(DataError):
        auc_scores([0, 1, 0], probs * 2)


def test_balanced_estimate():
    # TPR = 9/10, TNR = 5/8
    assert balanced_estimate(np.array([[5, 3], [1, 9]])) == 0.7625
    with pytest.raises(ContractError):
        balanced_estimate(np.eye(3))


def _rep(fold):
    y = np.array([0, 0, 1, 1, 2, 2])
    probs = np.eye(3)[[0, 0, 1, 1, 2, 1 if fold else 2]] * 0.8 + 0.2 / 3
    return evaluate_predictions(y, probs, ["a", "b", "c"], fold)


def test_report_aggregates_and_csv():
    csv_text, table, agg = report([_rep(0)])
    assert agg["accuracy"] == (1.0, 0.0)
    csv_text, table, agg = report([_rep(0), _rep(1)])
    assert agg["accuracy"][0] == pytest.approx((1 + 5 / 6) / 2)
    assert agg["accuracy"][1] == pytest.approx(np.std([1, 5 / 6]))
    rows = list(csv.DictReader(io.StringIO(csv_text)))
    macro1 = [r for r in rows if r["fold"] == "1" and r["class"] == "macro_avg"][0]
    assert float(macro1["accuracy"]) == _rep(1).accuracy
    assert float(macro1["f1"]) == _rep(1).prf.macro["f1"]
    assert "Average (μ) ± SD (σ)" in table and "Fold 2" in table


def test_population_sd_formatting():
    accs = np.array([0.9916, 0.9875, 0.9875, 0.9930, 0.9930])
    assert accs.mean() == pytest.approx(0.99052)
    assert format_pm(accs.mean(), accs.std()) == "0.9905 ± 0.0025"


def test_confusion_csv():
    text = confusion_csv(np.array([[1, 2], [3, 4]]), ["x", "y"])
    assert text.splitlines() == ["true\\pred,x,y", "x,1,2", "y,3,4"]
