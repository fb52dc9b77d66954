"""Independent reference implementations shared by the unit and acceptance tests."""

import numpy as np


def brute_prf(cm):
    """Count TP/FP/FN per class by walking every cell."""
    n = len(cm)
    out = []
    for c in range(n):
        tp = fp = fn = 0
        for t in range(n):
            for p in range(n):
                if t == c and p == c:
                    tp += cm[t][p]
                elif p == c:
                    fp += cm[t][p]
                elif t == c:
                    fn += cm[t][p]
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        out.append((prec, rec, f1))
    return np.array(out)


def trapezoid_auc(scores, pos):
    """Sweep every distinct threshold, integrate the ROC curve with trapezoids."""
    thr = np.unique(scores)[::-1]
    P, N = pos.sum(), (~pos).sum()
    tpr, fpr = [0.0], [0.0]
    for t in thr:
        sel = scores >= t
        tpr.append((sel & pos).sum() / P)
        fpr.append((sel & ~pos).sum() / N)
    area = 0.0
    for i in range(1, len(tpr)):
        area += (fpr[i] - fpr[i - 1]) * (tpr[i] + tpr[i - 1]) / 2
    return area
