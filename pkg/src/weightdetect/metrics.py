"""Detector evaluation: tie-aware ROC-AUC, clamped cross-entropy, ROC curves."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

DEFAULT_CLAMP = 1e-7


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    labels = labels.astype(bool)
    if labels.all() or not labels.any():
        raise ValueError("both classes must be present")
    return scores, labels


def roc_auc(scores, labels) -> float:
    """Probability that a poisoned model outscores a clean one, ties counting half.

    Uses the Mann-Whitney rank-sum with average ranks, which is exact under ties.
    """
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc_columns(X, labels) -> np.ndarray:
    """:func:`roc_auc` of every column of ``X`` at once."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if labels.all() or not labels.any():
        raise ValueError("both classes must be present")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    ranks = rankdata(X, axis=0)
    u = ranks[labels].sum(axis=0) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def cross_entropy(probs, labels, clamp: float = DEFAULT_CLAMP) -> float:
    """Mean binary cross-entropy with probabilities clipped to [clamp, 1 - clamp]."""
    p = np.clip(np.asarray(probs, dtype=np.float64).reshape(-1), clamp, 1.0 - clamp)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise ValueError(f"{p.size} probabilities but {y.size} labels")
    return float(np.mean(-y * np.log(p) - (1.0 - y) * np.log1p(-p)))


def roc_curve(scores, labels) -> list[tuple[float, float]]:
    """ROC points from (0, 0) to (1, 1), one per distinct score threshold.

    Tied scores move both rates in a single step, so the trapezoidal area of
    the curve equals :func:`roc_auc`.
    """
    scores, labels = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s, lab = scores[order], labels[order]
    tp = np.cumsum(lab)
    fp = np.cumsum(~lab)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    n_pos, n_neg = tp[-1], fp[-1]
    points = [(0.0, 0.0)]
    points.extend((fp[i] / n_neg, tp[i] / n_pos) for i in ends)
    return [(float(a), float(b)) for a, b in points]


def curve_area(points) -> float:
    fpr = np.array([p[0] for p in points])
    tpr = np.array([p[1] for p in points])
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


@dataclass(frozen=True)
class EvalReport:
    auc: float
    cross_entropy: float
    n_pos: int
    n_neg: int
    clamp: float = DEFAULT_CLAMP


def evaluate(probs, labels, clamp: float = DEFAULT_CLAMP) -> EvalReport:
    labels = np.asarray(labels).astype(int)
    return EvalReport(
        auc=roc_auc(probs, labels),
        cross_entropy=cross_entropy(probs, labels, clamp),
        n_pos=int(labels.sum()),
        n_neg=int(labels.size - labels.sum()),
        clamp=clamp,
    )


def write_metrics(path, report: EvalReport, extra: dict | None = None) -> None:
    doc = {
        "auc": report.auc,
        "ce": report.cross_entropy,
        "n_pos": report.n_pos,
        "n_neg": report.n_neg,
        "clamp": report.clamp,
    }
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def write_roc_csv(path, points) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["fpr", "tpr"])
        for fpr, tpr in points:
            w.writerow([repr(fpr), repr(tpr)])
