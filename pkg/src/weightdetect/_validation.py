"""Input checks shared by the estimators."""

from __future__ import annotations

import os

import numpy as np

from .weight_store import ModelWeights, read_model


def check_models(X) -> list[ModelWeights]:
    """Accept a model, a path, or a sequence of either; return a list of models."""
    if isinstance(X, (ModelWeights, str, os.PathLike)):
        X = [X]
    models = []
    for item in X:
        if isinstance(item, ModelWeights):
            models.append(item)
        elif isinstance(item, (str, os.PathLike)):
            models.append(read_model(item))
        else:
            raise TypeError(f"expected ModelWeights or a file path, got {type(item).__name__}")
    if not models:
        raise ValueError("no models given")
    return models


def check_labels(y, n: int | None = None, min_per_class: int = 1) -> np.ndarray:
    """Binary labels as an int array with both classes present."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {y.shape}")
    if n is not None and y.size != n:
        raise ValueError(f"{y.size} labels for {n} samples")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 (clean) or 1 (poisoned)")
    y = y.astype(int)
    counts = np.bincount(y, minlength=2)
    if counts.min() < min_per_class:
        raise ValueError(
            f"need at least {min_per_class} model(s) per class, got {counts[0]} clean / {counts[1]} poisoned"
        )
    return y


def check_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D feature matrix, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("feature matrix contains NaN or Inf")
    return X
