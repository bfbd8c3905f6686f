"""Univariate weight ranking and held-out tensor ranking."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_labels, check_matrix
from .logreg import train_logreg
from .metrics import roc_auc, roc_auc_columns
from .preprocess import FeatureIndex, FeatureMatrix, PreprocessConfig, build_feature_matrix
from .weight_store import ArchitectureSignature, ModelWeights

DEFAULT_WEIGHT_K = 1000
DEFAULT_TENSOR_K = 25


class SplitError(RuntimeError):
    """Could not draw a sub-split containing both classes."""


@dataclass(frozen=True)
class FeatureScore:
    index: FeatureIndex
    sigma: float


@dataclass(frozen=True)
class TensorScore:
    tensor_name: str
    mean_validation_auc: float
    n_splits: int


def _values(X) -> np.ndarray:
    return X.values if isinstance(X, FeatureMatrix) else check_matrix(X)


def feature_auc_scores(X, y) -> np.ndarray:
    """``|AUC - 0.5|`` of every column used directly as a detection score.

    This is the same number a one-feature logistic model would give: its
    output is a monotone function of the column, and AUC only sees ranks.
    """
    values = _values(X)
    y = check_labels(y, len(values))
    return np.abs(roc_auc_columns(values, y) - 0.5)


def feature_correlation_scores(X, y) -> np.ndarray:
    """Absolute Pearson correlation of every column with the labels; 0 for constant columns."""
    values = _values(X)
    y = check_labels(y, len(values)).astype(np.float64)
    xc = values - values.mean(axis=0)
    yc = y - y.mean()
    sxx = np.sqrt((xc**2).sum(axis=0))
    syy = np.sqrt((yc**2).sum())
    num = np.abs(yc @ xc)
    out = np.zeros(values.shape[1])
    ok = sxx > 0
    out[ok] = num[ok] / (sxx[ok] * syy)
    return np.minimum(out, 1.0)


def select_top_weights(scores, k: int = DEFAULT_WEIGHT_K) -> np.ndarray:
    """Column indices of the ``k`` highest scores, best first.

    Ties keep column order, which is signature tensor order then position.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores = np.asarray(scores, dtype=np.float64)
    return np.argsort(-scores, kind="stable")[:k]


def feature_scores(X: FeatureMatrix, y, criterion: str = "auc") -> list[FeatureScore]:
    fn = {"auc": feature_auc_scores, "correlation": feature_correlation_scores}[criterion]
    sig = fn(X, y)
    return [FeatureScore(c, float(s)) for c, s in zip(X.columns, sig)]


def write_feature_report(path, columns: Sequence[FeatureIndex], sigma) -> None:
    """``features.json``: one {tensor, position, sigma} row per selected feature."""
    rows = [
        {"tensor": c.tensor_name, "position": int(c.position), "sigma": float(s)}
        for c, s in zip(columns, sigma)
    ]
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"features": rows}, f, indent=1)
        f.write("\n")


def draw_split(y, test_size: int, rng, max_retries: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Random (train, test) index split where both sides contain both classes."""
    y = np.asarray(y)
    n = len(y)
    if not 0 < test_size < n:
        raise SplitError(f"cannot hold out {test_size} of {n} models")
    for _ in range(max_retries):
        perm = rng.permutation(n)
        test, train = perm[:test_size], perm[test_size:]
        if len(np.unique(y[test])) == 2 and len(np.unique(y[train])) == 2:
            return np.sort(train), np.sort(test)
    raise SplitError(f"no split with both classes on each side after {max_retries} draws")


def tensor_generalization_scores(
    models: Sequence[ModelWeights],
    y,
    base_config: PreprocessConfig,
    signature: ArchitectureSignature,
    n_splits: int = 5,
    train_fraction: float = 0.8,
    seed: int = 0,
    weight_k: int = DEFAULT_WEIGHT_K,
    P: float = 1.0,
) -> list[TensorScore]:
    """Mean validation AUC of a per-tensor detector, for every signature tensor.

    The same ``n_splits`` random sub-splits are reused for every tensor. On
    each one the tensor's features are ranked on the training side, the top
    ``weight_k`` feed a logistic fit at fixed ``P``, and the validation AUC
    is recorded.
    """
    y = check_labels(y, len(models), min_per_class=2)
    n = len(y)
    n_val = min(max(2, int(round((1.0 - train_fraction) * n))), n - 2)
    rng = np.random.default_rng(seed)
    splits = [draw_split(y, n_val, rng) for _ in range(n_splits)]
    scores = []
    for name in signature.names:
        cfg = base_config.with_whitelist([name])
        X = build_feature_matrix(models, cfg, signature).values
        aucs = []
        for train, val in splits:
            top = select_top_weights(feature_auc_scores(X[train], y[train]), weight_k)
            W, b = train_logreg(X[np.ix_(train, top)], y[train], P)
            aucs.append(roc_auc(X[np.ix_(val, top)] @ W + b, y[val]))
        scores.append(TensorScore(name, float(np.mean(aucs)), n_splits))
    return scores


def select_top_tensors(scores: Sequence[TensorScore], k: int = DEFAULT_TENSOR_K) -> list[str]:
    """Names of the ``k`` best tensors by mean validation AUC; ties keep input order."""
    order = np.argsort([-s.mean_validation_auc for s in scores], kind="stable")
    return [scores[i].tensor_name for i in order[:k]]


class TopWeightSelector(TransformerMixin, BaseEstimator):
    """Keep the ``k`` columns whose values best separate the classes on their own.

    Columns come out best first, not in their input order.
    """

    def __init__(self, k=DEFAULT_WEIGHT_K, criterion="auc"):
        self.k = k
        self.criterion = criterion

    def fit(self, X, y):
        if self.criterion == "auc":
            self.scores_ = feature_auc_scores(X, y)
        elif self.criterion == "correlation":
            self.scores_ = feature_correlation_scores(X, y)
        else:
            raise ValueError(f"unknown criterion {self.criterion!r}")
        self.indices_ = select_top_weights(self.scores_, self.k)
        self.n_features_in_ = len(self.scores_)
        return self

    def transform(self, X):
        check_is_fitted(self, "indices_")
        return _values(X)[:, self.indices_]
