"""End-to-end weight-space detector: fit, predict, and the JSON artifact."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_labels, check_matrix, check_models
from .feature_select import (
    DEFAULT_TENSOR_K,
    DEFAULT_WEIGHT_K,
    draw_split,
    feature_auc_scores,
    select_top_tensors,
    select_top_weights,
    tensor_generalization_scores,
)
from .logreg import fit_logreg, train_logreg
from .metrics import cross_entropy
from .preprocess import (
    FeatureIndex,
    PreprocessConfig,
    build_feature_matrix,
    model_row,
    resolve_signature,
)
from .weight_store import ArchitectureError, ArchitectureSignature, ModelWeights, WeightTensor

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class DetectorFormatError(ValueError):
    """Detector file is malformed or from an unsupported version."""


@dataclass(frozen=True)
class CVSpec:
    grid: tuple[float, ...] = tuple(np.logspace(-4, 4, 17).tolist())
    iterations: int = 30
    holdout_fraction: float = 0.1
    seed: int = 0
    max_retries: int = 100

    def __post_init__(self):
        grid = tuple(float(p) for p in self.grid)
        if not grid or any(p <= 0 for p in grid) or list(grid) != sorted(grid):
            raise ValueError("grid must be a non-empty ascending list of positive values")
        if not 0 < self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must be in (0, 1)")
        object.__setattr__(self, "grid", grid)

    @classmethod
    def log_grid(cls, p_min=1e-4, p_max=1e4, points=17, **kw) -> "CVSpec":
        return cls(grid=tuple(np.logspace(np.log10(p_min), np.log10(p_max), points).tolist()), **kw)


@dataclass
class CVResult:
    best_P: float
    grid: list[float]
    mean_ce: list[float]

    @property
    def best_ce(self) -> float:
        return self.mean_ce[self.grid.index(self.best_P)]


def holdout_size(n: int, fraction: float) -> int:
    # at least 2 so a holdout can contain both classes
    return min(max(2, int(round(fraction * n))), n - 2)


def cross_validate_P(X, y, spec: CVSpec = CVSpec()) -> CVResult:
    """Pick ``P`` by mean holdout cross-entropy over repeated random holdouts.

    Iteration ``i`` draws its holdout with seed ``spec.seed + i``; the same
    holdouts are used for every grid value. Ties go to the smaller ``P``.
    """
    X = check_matrix(X)
    y = check_labels(y, len(X), min_per_class=2)
    n = len(y)
    if len(spec.grid) == 1:
        return CVResult(spec.grid[0], list(spec.grid), [float("nan")])
    n_test = holdout_size(n, spec.holdout_fraction)
    gram = X @ X.T
    ce = np.zeros((len(spec.grid), spec.iterations))
    for i in range(spec.iterations):
        rng = np.random.default_rng(spec.seed + i)
        train, test = draw_split(y, n_test, rng, spec.max_retries)
        sub_gram = gram[np.ix_(train, train)]
        for j, P in enumerate(spec.grid):
            fit = fit_logreg(X[train], y[train], P, gram=sub_gram)
            ce[j, i] = cross_entropy(expit(X[test] @ fit.W + fit.b), y[test])
    mean = ce.mean(axis=1)
    best = int(np.argmin(mean))
    return CVResult(spec.grid[best], list(spec.grid), mean.tolist())


@dataclass
class Detector:
    preprocess: PreprocessConfig
    features: list[FeatureIndex]
    W: np.ndarray
    b: float
    P: float
    signature: ArchitectureSignature
    training_summary: dict = field(default_factory=dict)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        if len(self.W) != len(self.features):
            raise ValueError(f"{len(self.W)} weights for {len(self.features)} features")
        if not self.P > 0:
            raise ValueError("P must be positive")

    def feature_vector(self, model: ModelWeights) -> np.ndarray:
        """Preprocess one model and gather the selected features."""
        self.signature.check(model)
        row = model_row(model, self.preprocess, self.signature)
        return row[self._column_indices()]

    def _column_indices(self) -> np.ndarray:
        offsets, start = {}, 0
        for name, shape in self.signature.tensor_specs:
            offsets[name] = start
            start += int(np.prod(shape))
        return np.array([offsets[f.tensor_name] + f.position for f in self.features], dtype=int)

    def decision_function(self, models) -> np.ndarray:
        X = np.array([self.feature_vector(m) for m in check_models(models)])
        return X.reshape(-1, len(self.features)) @ self.W + self.b

    def predict_proba(self, models) -> np.ndarray:
        return expit(self.decision_function(models))


def predict_proba(detector: Detector, model: ModelWeights) -> float:
    """Poisoning probability of a single model."""
    return float(detector.predict_proba([model])[0])


# name -> (reference, norm_method, tensor_selection, sorted)
NAMED_CONFIGS = {
    "Base": (True, "tensor", True, False),
    "A": (False, "tensor", True, False),
    "B": (True, "model", True, True),
    "C": (True, "tensor", False, False),
    "D": (True, "tensor", True, True),
    "E": (False, "tensor", True, True),
    "F": (False, "none", True, True),
}


class ConfigError(ValueError):
    """Unknown configuration name or missing reference model."""


@dataclass(frozen=True)
class DetectorConfig:
    use_reference: bool = False
    norm_method: str = "tensor"
    tensor_selection: bool = True
    sorted: bool = False
    weight_k: int = DEFAULT_WEIGHT_K
    tensor_k: int = DEFAULT_TENSOR_K
    cv: CVSpec = CVSpec()
    fixed_P: float | None = None
    tensor_splits: int = 5
    seed: int = 0

    @classmethod
    def named(cls, name: str, **overrides) -> "DetectorConfig":
        if name not in NAMED_CONFIGS:
            raise ConfigError(f"unknown config {name!r}; choose from {sorted(NAMED_CONFIGS)}")
        ref, norm, tsel, srt = NAMED_CONFIGS[name]
        return cls(use_reference=ref, norm_method=norm, tensor_selection=tsel, sorted=srt, **overrides)


def fit_detector(
    models: Sequence[ModelWeights],
    y,
    config: DetectorConfig = DetectorConfig(),
    reference: ModelWeights | None = None,
) -> Detector:
    """Train a detector on labeled models.

    Steps: common architecture, optional tensor ranking (top ``tensor_k``),
    feature matrix, top ``weight_k`` weights by ``|AUC - 0.5|``, ``P`` by
    cross-validation (unless ``fixed_P``), then a final fit on every model.

    A config that asks for a reference model runs without subtraction when
    ``reference`` is None; models trained from scratch have no common
    ancestor to subtract.
    """
    models = check_models(models)
    y = check_labels(y, len(models), min_per_class=2)
    ref = reference if config.use_reference else None
    base = PreprocessConfig(reference=ref, norm_method=config.norm_method, sorted=config.sorted)
    signature = resolve_signature(models, base)

    tensor_scores = None
    if config.tensor_selection:
        tensor_scores = tensor_generalization_scores(
            models, y, base, signature, n_splits=config.tensor_splits, seed=config.seed,
            weight_k=config.weight_k,
        )
        keep = set(select_top_tensors(tensor_scores, config.tensor_k))
        whitelist = [n for n in signature.names if n in keep]
    else:
        whitelist = signature.names
    pre = base.with_whitelist(whitelist)
    signature = signature.restrict(whitelist)

    fm = build_feature_matrix(models, pre, signature)
    sigma = feature_auc_scores(fm, y)
    top = select_top_weights(sigma, config.weight_k)
    X = fm.values[:, top]

    if config.fixed_P is not None:
        P, cv_ce = float(config.fixed_P), None
    else:
        cv = cross_validate_P(X, y, config.cv)
        P, cv_ce = cv.best_P, cv.best_ce
    W, b = train_logreg(X, y, P)
    summary = {
        "n_models": len(y),
        "n_poisoned": int(y.sum()),
        "cv_cross_entropy": cv_ce,
        "tensor_scores": None if tensor_scores is None else {
            s.tensor_name: s.mean_validation_auc for s in tensor_scores
        },
    }
    return Detector(pre, [fm.columns[i] for i in top], W, float(b), P, signature, summary)


class WeightDetector(ClassifierMixin, BaseEstimator):
    """Estimator interface to :func:`fit_detector`; ``X`` is a list of models or file paths.

    Parameters mirror :class:`DetectorConfig`; ``cv=None`` means the default
    search grid.
    """

    def __init__(
        self,
        reference=None,
        norm_method="tensor",
        sorted=False,
        tensor_selection=True,
        weight_k=DEFAULT_WEIGHT_K,
        tensor_k=DEFAULT_TENSOR_K,
        cv=None,
        fixed_P=None,
        seed=0,
    ):
        self.reference = reference
        self.norm_method = norm_method
        self.sorted = sorted
        self.tensor_selection = tensor_selection
        self.weight_k = weight_k
        self.tensor_k = tensor_k
        self.cv = cv
        self.fixed_P = fixed_P
        self.seed = seed

    @classmethod
    def from_named(cls, name: str, reference=None, **params) -> "WeightDetector":
        cfg = DetectorConfig.named(name)
        return cls(
            reference=reference if cfg.use_reference else None,
            norm_method=cfg.norm_method,
            sorted=cfg.sorted,
            tensor_selection=cfg.tensor_selection,
            **params,
        )

    def _config(self) -> DetectorConfig:
        return DetectorConfig(
            use_reference=self.reference is not None,
            norm_method=self.norm_method,
            tensor_selection=self.tensor_selection,
            sorted=self.sorted,
            weight_k=self.weight_k,
            tensor_k=self.tensor_k,
            cv=self.cv if self.cv is not None else CVSpec(seed=self.seed),
            fixed_P=self.fixed_P,
            seed=self.seed,
        )

    def fit(self, X, y):
        self.detector_ = fit_detector(X, y, self._config(), self.reference)
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X):
        check_is_fitted(self, "detector_")
        return self.detector_.decision_function(X)

    def predict_proba(self, X):
        p = expit(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)


def _tensor_to_json(t: WeightTensor) -> dict:
    return {"name": t.name, "shape": list(t.shape), "data": [float(v) for v in t.data]}


def detector_to_json(det: Detector) -> dict:
    ref = det.preprocess.reference
    return {
        "version": FORMAT_VERSION,
        "preprocess": {
            "norm_method": det.preprocess.norm_method,
            "sorted": det.preprocess.sorted,
            "tensor_whitelist": None if det.preprocess.tensor_whitelist is None
            else list(det.preprocess.tensor_whitelist),
            "reference": None if ref is None else {
                "metadata": dict(ref.metadata),
                "tensors": [_tensor_to_json(t) for t in ref.tensors],
            },
        },
        "signature": det.signature.to_json(),
        "features": [{"tensor": f.tensor_name, "position": int(f.position)} for f in det.features],
        "W": [float(w) for w in det.W],
        "b": float(det.b),
        "P": float(det.P),
        "training_summary": det.training_summary,
    }


def detector_from_json(doc) -> Detector:
    if not isinstance(doc, dict) or "version" not in doc:
        raise DetectorFormatError("not a detector document")
    if doc["version"] != FORMAT_VERSION:
        raise DetectorFormatError(f"unsupported detector version {doc['version']!r}")
    try:
        pp = doc["preprocess"]
        ref = None
        if pp.get("reference") is not None:
            ref = ModelWeights(
                tuple(
                    WeightTensor(t["name"], tuple(t["shape"]), np.array(t["data"], dtype=np.float32))
                    for t in pp["reference"]["tensors"]
                ),
                pp["reference"].get("metadata", {}),
            )
        config = PreprocessConfig(
            reference=ref,
            norm_method=pp["norm_method"],
            sorted=bool(pp["sorted"]),
            tensor_whitelist=pp.get("tensor_whitelist"),
        )
        return Detector(
            preprocess=config,
            features=[FeatureIndex(str(f["tensor"]), int(f["position"])) for f in doc["features"]],
            W=np.array(doc["W"], dtype=np.float64),
            b=float(doc["b"]),
            P=float(doc["P"]),
            signature=ArchitectureSignature.from_json(doc["signature"]),
            training_summary=dict(doc.get("training_summary", {})),
        )
    except (KeyError, TypeError, ValueError, ArchitectureError) as exc:
        if isinstance(exc, DetectorFormatError):
            raise
        raise DetectorFormatError(f"malformed detector: {exc}") from exc


def dumps_detector(det: Detector) -> str:
    return json.dumps(detector_to_json(det), indent=1) + "\n"


def save_detector(path, det: Detector) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps_detector(det))


def load_detector(path) -> Detector:
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except ValueError as exc:
            raise DetectorFormatError(f"{path}: not valid JSON ({exc})") from exc
    return detector_from_json(doc)
