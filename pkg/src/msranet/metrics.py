"""Classification metrics: confusion matrix, precision/recall/F1, accuracy, AUC."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, DataError


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], n: int) -> np.ndarray:
    """``n x n`` counts, rows indexed by true class and columns by prediction."""
    t = np.asarray(y_true, dtype=np.int64)
    p = np.asarray(y_pred, dtype=np.int64)
    if t.shape != p.shape:
        raise DataError(f"y_true has {t.size} entries, y_pred has {p.size}")
    if t.size and (t.min() < 0 or p.min() < 0 or t.max() >= n or p.max() >= n):
        raise DataError(f"class ids must lie in [0, {n})")
    cm = np.zeros((n, n), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def one_vs_rest(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-class (TP, FP, FN, TN) treating each class as the positive one."""
    cm = np.asarray(cm)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = cm.sum() - tp - fp - fn
    return tp, fp, fn, tn


def _safe_div(num: np.ndarray, den: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    zero = den == 0
    out = np.divide(num, den, out=np.zeros_like(num), where=~zero)
    return out, zero


@dataclass
class PRFScores:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    undefined: np.ndarray  # per class: some ratio had a zero denominator and was set to 0
    macro: dict[str, float] = field(default_factory=dict)
    weighted: dict[str, float] = field(default_factory=dict)


def prf_scores(cm: np.ndarray) -> PRFScores:
    """Per-class precision, recall and F1, plus macro and support-weighted averages.

    Recall uses TP / (TP + FN). A zero denominator yields 0 and sets the
    ``undefined`` flag for that class.
    """
    tp, fp, fn, _ = one_vs_rest(cm)
    precision, p0 = _safe_div(tp, tp + fp)
    recall, r0 = _safe_div(tp, tp + fn)
    f1, f0 = _safe_div(2 * precision * recall, precision + recall)
    support = np.asarray(cm).sum(axis=1)
    total = support.sum()
    scores = PRFScores(precision, recall, f1, support, p0 | r0 | f0)
    for name, vals in (("precision", precision), ("recall", recall), ("f1", f1)):
        scores.macro[name] = float(vals.mean())
        scores.weighted[name] = float((vals * support).sum() / total) if total else 0.0
    return scores


def accuracy(cm: np.ndarray) -> float:
    cm = np.asarray(cm)
    total = cm.sum()
    if total == 0:
        raise ContractError("accuracy of an empty confusion matrix is undefined")
    return float(np.trace(cm) / total)


def binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """ROC AUC by the Mann-Whitney rank statistic, ties at midrank."""
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores, method="average")
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class AUCScores:
    per_class: np.ndarray  # nan where the class is absent (or the only one present)
    macro: float
    excluded: list[int]


def auc_scores(y_true: Sequence[int], probs: np.ndarray) -> AUCScores:
    """One-vs-rest ROC AUC per class and their macro mean over defined classes."""
    probs = np.asarray(probs.data if hasattr(probs, "data") else probs, dtype=np.float64)
    y = np.asarray(y_true)
    if probs.ndim != 2 or probs.shape[0] != y.size:
        raise DataError(f"probability matrix {probs.shape} does not match {y.size} labels")
    if not np.allclose(probs.sum(axis=1), 1, atol=1e-5):
        raise DataError("probability rows must sum to 1")
    per = np.array([binary_auc(probs[:, c], y == c) for c in range(probs.shape[1])])
    excluded = [int(c) for c in np.flatnonzero(np.isnan(per))]
    defined = per[~np.isnan(per)]
    return AUCScores(per, float(defined.mean()) if defined.size else float("nan"), excluded)


def balanced_estimate(cm: np.ndarray) -> float:
    """Balanced estimate 1/2 (TP/(TP+FN) + TN/(TN+FP)) of a binary confusion matrix.

    ``cm`` is ``[[TN, FP], [FN, TP]]`` with class 1 as the positive class.
    """
    cm = np.asarray(cm)
    if cm.shape != (2, 2):
        raise ContractError("balanced_estimate expects a 2x2 one-vs-rest matrix")
    tn, fp, fn, tp = cm.ravel()
    tpr, _ = _safe_div(tp, tp + fn)
    tnr, _ = _safe_div(tn, tn + fp)
    return float((tpr + tnr) / 2)


def balanced_per_class(cm: np.ndarray) -> np.ndarray:
    tp, fp, fn, tn = one_vs_rest(cm)
    return np.array([balanced_estimate([[tn[c], fp[c]], [fn[c], tp[c]]]) for c in range(len(tp))])


@dataclass
class MetricsReport:
    fold: int
    class_names: list[str]
    cm: np.ndarray
    prf: PRFScores
    accuracy: float
    auc: AUCScores
    balanced: np.ndarray

    @property
    def n_samples(self) -> int:
        return int(self.cm.sum())

    def summary(self) -> dict[str, float]:
        return {
            "precision": self.prf.macro["precision"],
            "recall": self.prf.macro["recall"],
            "f1": self.prf.macro["f1"],
            "accuracy": self.accuracy,
            "auc": self.auc.macro,
        }


def evaluate_predictions(y_true, probs, class_names: Sequence[str], fold: int = 0) -> MetricsReport:
    probs = np.asarray(probs.data if hasattr(probs, "data") else probs)
    n = len(class_names)
    cm = confusion_matrix(y_true, probs.argmax(axis=1), n)
    return MetricsReport(fold, list(class_names), cm, prf_scores(cm), accuracy(cm), auc_scores(y_true, probs), balanced_per_class(cm))


def aggregate(summaries: Sequence[dict[str, float]]) -> dict[str, tuple[float, float]]:
    """Mean and population SD across folds for every summary key."""
    out = {}
    for key in summaries[0]:
        vals = np.array([s[key] for s in summaries], dtype=np.float64)
        out[key] = (float(vals.mean()), float(vals.std()))
    return out


def format_pm(mean: float, sd: float, digits: int = 4) -> str:
    return f"{mean:.{digits}f} ± {sd:.{digits}f}"


CSV_COLUMNS = ["fold", "class", "precision", "recall", "f1", "support", "accuracy", "auc", "balanced"]


def _fmt(x) -> str:
    return repr(float(x))


def report(reports: Sequence[MetricsReport]) -> tuple[str, str, dict[str, tuple[float, float]]]:
    """Render per-fold reports as (CSV text, human-readable table, aggregates).

    Aggregates are mean and population standard deviation over folds of the
    macro precision, recall, F1, accuracy and AUC.
    """
    if not reports:
        raise ContractError("report needs at least one fold")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    lines = [f"{'Fold':<8}{'Class':<14}{'Precision':>10}{'Recall':>10}{'F1-score':>10}{'Support':>9}{'Accuracy':>10}{'Avg. AUC':>10}"]
    for rep in reports:
        for c, name in enumerate(rep.class_names):
            w.writerow([rep.fold, name, _fmt(rep.prf.precision[c]), _fmt(rep.prf.recall[c]), _fmt(rep.prf.f1[c]),
                        int(rep.prf.support[c]), "", _fmt(rep.auc.per_class[c]), _fmt(rep.balanced[c])])
            first = c == 0
            lines.append(
                f"{('Fold ' + str(rep.fold + 1)) if first else '':<8}{name:<14}{rep.prf.precision[c]:>10.2f}"
                f"{rep.prf.recall[c]:>10.2f}{rep.prf.f1[c]:>10.2f}{int(rep.prf.support[c]):>9d}"
                + (f"{rep.accuracy:>10.4f}{rep.auc.macro:>10.4f}" if first else "")
            )
        for kind in ("macro", "weighted"):
            avg = getattr(rep.prf, kind)
            w.writerow([rep.fold, f"{kind}_avg", _fmt(avg["precision"]), _fmt(avg["recall"]), _fmt(avg["f1"]),
                        rep.n_samples, _fmt(rep.accuracy), _fmt(rep.auc.macro), _fmt(rep.balanced.mean())])

    agg = aggregate([r.summary() for r in reports])
    w.writerow(["mean", "", *(_fmt(agg[k][0]) for k in ("precision", "recall", "f1")), "",
                _fmt(agg["accuracy"][0]), _fmt(agg["auc"][0]), ""])
    w.writerow(["sd", "", *(_fmt(agg[k][1]) for k in ("precision", "recall", "f1")), "",
                _fmt(agg["accuracy"][1]), _fmt(agg["auc"][1]), ""])
    def pm(k):
        return format_pm(*agg[k])

    lines.append(
        f"Average (μ) ± SD (σ): precision {pm('precision')}, recall {pm('recall')}, "
        f"F1 {pm('f1')}, accuracy {pm('accuracy')}, AUC {pm('auc')}"
    )
    return buf.getvalue(), "\n".join(lines), agg


def confusion_csv(cm: np.ndarray, class_names: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true\\pred", *class_names])
    for name, row in zip(class_names, np.asarray(cm)):
        w.writerow([name, *map(int, row)])
    return buf.getvalue()
