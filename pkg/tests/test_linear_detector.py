import json
import math

import numpy as np
import pytest

from weightdetect.linear_detector import (
    NAMED_CONFIGS,
    ConfigError,
    CVSpec,
    Detector,
    DetectorConfig,
    DetectorFormatError,
    WeightDetector,
    cross_validate_P,
    detector_from_json,
    detector_to_json,
    dumps_detector,
    fit_detector,
    holdout_size,
    load_detector,
    predict_proba,
    save_detector,
)
from weightdetect.preprocess import FeatureIndex, PreprocessConfig
from weightdetect.weight_store import ArchitectureError, ArchitectureSignature, ModelWeights

FAST_CV = CVSpec.log_grid(1e-2, 1e2, 5, iterations=3)


def labeled_models(rng, n=40, signal=1.0):
    y = np.r_[np.zeros(n // 2, int), np.ones(n // 2, int)]
    models = []
    for label in y:
        w = rng.normal(size=(4, 5))
        w[0, 0] += signal * label
        models.append(ModelWeights.from_arrays({"fc1.weight": w, "fc1.bias": rng.normal(size=4)}))
    return models, y


def test_cv_defaults():
    spec = CVSpec()
    assert len(spec.grid) == 17
    assert spec.grid[0] == pytest.approx(1e-4) and spec.grid[-1] == pytest.approx(1e4)
    assert spec.iterations == 30 and spec.holdout_fraction == 0.1
    with pytest.raises(ValueError):
        CVSpec(grid=(1.0, 0.1))


def test_holdout_size():
    assert holdout_size(200, 0.1) == 20
    assert holdout_size(10, 0.1) == 2
    assert holdout_size(3, 0.9) == 1


def test_cv_separable_data_has_low_ce():
    rng = np.random.default_rng(0)
    y = np.r_[np.zeros(30, int), np.ones(30, int)]
    X = np.c_[2.0 * y - 1 + 0.05 * rng.normal(size=60), rng.normal(size=60)]
    res = cross_validate_P(X, y, CVSpec(iterations=10))
    assert res.best_ce < 0.1


def test_cv_noise_small_P_is_near_ln2():
    rng = np.random.default_rng(1)
    y = np.r_[np.zeros(30, int), np.ones(30, int)]
    X = rng.normal(size=(60, 20))
    res = cross_validate_P(X, y, CVSpec(iterations=10))
    assert res.mean_ce[0] >= math.log(2) - 0.05


def test_cv_single_grid_point_returned_unchanged():
    rng = np.random.default_rng(2)
    res = cross_validate_P(rng.normal(size=(10, 2)), [0, 1] * 5, CVSpec(grid=(3.0,)))
    assert res.best_P == 3.0


def test_cv_ties_go_to_smaller_P():
    # all-zero features: every P gives the same base-rate fit
    X = np.zeros((20, 3))
    res = cross_validate_P(X, [0, 1] * 10, CVSpec(grid=(0.1, 1.0, 10.0), iterations=4))
    assert res.best_P == 0.1


def test_named_configs_table():
    expect = {
        "Base": (True, "tensor", True, False),
        "A": (False, "tensor", True, False),
        "B": (True, "model", True, True),
        "C": (True, "tensor", False, False),
        "D": (True, "tensor", True, True),
        "E": (False, "tensor", True, True),
        "F": (False, "none", True, True),
    }
    assert NAMED_CONFIGS == expect
    for name, (ref, norm, tsel, srt) in expect.items():
        c = DetectorConfig.named(name)
        assert (c.use_reference, c.norm_method, c.tensor_selection, c.sorted) == (ref, norm, tsel, srt)
    with pytest.raises(ConfigError):
        DetectorConfig.named("G")


def trivial_detector(W=(0.0,), b=0.0):
    sig = ArchitectureSignature((("t", (1,)),))
    return Detector(PreprocessConfig(norm_method="none"), [FeatureIndex("t", 0)], np.array(W), b, 1.0, sig)


def test_predict_proba_closed_form():
    m = ModelWeights.from_arrays({"t": np.array([4.0])})
    assert predict_proba(trivial_detector(), m) == 0.5
    assert predict_proba(trivial_detector(W=(0.5,)), m) == pytest.approx(0.880797, abs=1e-6)


def test_predict_architecture_mismatch():
    with pytest.raises(ArchitectureError):
        predict_proba(trivial_detector(), ModelWeights.from_arrays({"u": np.array([1.0])}))


def test_batch_equals_single():
    rng = np.random.default_rng(3)
    models, y = labeled_models(rng)
    det = fit_detector(models, y, DetectorConfig(cv=FAST_CV))
    batch = det.predict_proba(models)
    assert np.array_equal(batch, [predict_proba(det, m) for m in models])


def test_single_feature_equal_to_label():
    y = np.array([0, 1] * 10)
    models = [ModelWeights.from_arrays({"t": np.array([float(v), 0.3])}) for v in y]
    det = fit_detector(models[:14], y[:14], DetectorConfig(norm_method="none", cv=FAST_CV))
    p = det.predict_proba(models[14:])
    assert np.all(p[y[14:] == 1] > p[y[14:] == 0].max())


def test_fit_detector_summary_and_determinism():
    rng = np.random.default_rng(4)
    models, y = labeled_models(rng)
    cfg = DetectorConfig(sorted=False, cv=FAST_CV, weight_k=5)
    a, b = fit_detector(models, y, cfg), fit_detector(models, y, cfg)
    assert dumps_detector(a) == dumps_detector(b)
    assert len(a.features) == 5
    assert a.training_summary["n_models"] == 40
    assert set(a.training_summary["tensor_scores"]) == {"fc1.weight", "fc1.bias"}
    assert a.features[0] == FeatureIndex("fc1.weight", 0)


def test_tensor_k_restricts_whitelist():
    rng = np.random.default_rng(5)
    models, y = labeled_models(rng, signal=3.0)
    det = fit_detector(models, y, DetectorConfig(tensor_k=1, cv=FAST_CV))
    assert det.preprocess.tensor_whitelist == ("fc1.weight",)
    assert det.signature.names == ["fc1.weight"]


def test_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    models, y = labeled_models(rng)
    ref = labeled_models(rng, 2)[0][0]
    det = fit_detector(models, y, DetectorConfig(use_reference=True, sorted=True, cv=FAST_CV), ref)
    save_detector(tmp_path / "d.json", det)
    back = load_detector(tmp_path / "d.json")
    assert dumps_detector(back) == dumps_detector(det)
    assert back.preprocess.reference == ref
    assert np.array_equal(back.W, det.W) and back.b == det.b
    np.testing.assert_array_equal(back.predict_proba(models), det.predict_proba(models))


def test_random_detectors_roundtrip():
    rng = np.random.default_rng(7)
    for _ in range(25):
        n = int(rng.integers(1, 6))
        sig = ArchitectureSignature((("a", (n, 2)), ("b", (3,))))
        feats = [FeatureIndex("a", int(p)) for p in rng.choice(2 * n, size=n, replace=False)]
        det = Detector(
            PreprocessConfig(norm_method=["tensor", "model", "none"][int(rng.integers(3))],
                             sorted=bool(rng.integers(2)), tensor_whitelist=("a", "b")),
            feats, rng.normal(size=n) * 10.0 ** rng.integers(-5, 5), float(rng.normal()),
            float(10 ** rng.uniform(-4, 4)), sig, {"n_models": 3},
        )
        back = detector_from_json(json.loads(dumps_detector(det)))
        assert dumps_detector(back) == dumps_detector(det)
        assert np.array_equal(back.W, det.W) and back.P == det.P


def test_version_and_malformed_rejected(tmp_path):
    doc = detector_to_json(trivial_detector())
    with pytest.raises(DetectorFormatError):
        detector_from_json({**doc, "version": 2})
    with pytest.raises(DetectorFormatError):
        detector_from_json({k: v for k, v in doc.items() if k != "W"})
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(DetectorFormatError):
        load_detector(tmp_path / "bad.json")


def test_estimator_wrapper():
    rng = np.random.default_rng(8)
    models, y = labeled_models(rng, signal=3.0)
    clf = WeightDetector.from_named("E", cv=FAST_CV).fit(models, y)
    assert clf.predict_proba(models).shape == (40, 2)
    assert clf.score(models, y) > 0.7
    assert WeightDetector.from_named("D").reference is None
    assert clf.get_params()["sorted"] is True
