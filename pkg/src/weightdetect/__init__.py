"""Detect backdoored neural networks from their weights with a linear classifier."""

from .feature_select import TopWeightSelector, feature_auc_scores, select_top_weights
from .linear_detector import (
    CVSpec,
    Detector,
    DetectorConfig,
    WeightDetector,
    cross_validate_P,
    fit_detector,
    load_detector,
    predict_proba,
    save_detector,
)
from .logreg import L2LogisticRegression, train_logreg
from .metrics import cross_entropy, roc_auc, roc_curve
from .preprocess import PreprocessConfig, WeightFlattener, build_feature_matrix
from .weight_store import (
    Manifest,
    ModelWeights,
    WeightTensor,
    common_architecture,
    read_manifest,
    read_model,
    write_manifest,
    write_model,
)

__version__ = "0.1.0"
