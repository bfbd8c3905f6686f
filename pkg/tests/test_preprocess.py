from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from weightdetect.preprocess import (
    DegenerateTensorError,
    PreprocessConfig,
    WeightFlattener,
    build_feature_matrix,
    model_norm,
    resolve_signature,
    sort_tensor,
    subtract_reference,
    tensor_norm,
)
from weightdetect.weight_store import ArchitectureError, ModelWeights, common_architecture

finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)


def two_tensor_models(rng, n=4):
    return [
        ModelWeights.from_arrays({"a": rng.normal(size=(3, 4)), "b": rng.normal(size=5) * 3})
        for _ in range(n)
    ]


def test_subtract_reference_examples():
    m = ModelWeights.from_arrays({"t": np.array([3.0, 5.0]), "extra": np.ones(2)})
    r = ModelWeights.from_arrays({"t": np.array([1.0, 2.0])})
    sig = common_architecture([m, r])
    assert subtract_reference(m, r, sig)["t"].tolist() == [2.0, 3.0]
    assert subtract_reference(r, r, sig)["t"].tolist() == [0.0, 0.0]
    assert list(subtract_reference(m, r, sig)) == ["t"]


def test_subtract_reference_loop_oracle():
    rng = np.random.default_rng(0)
    m, r = two_tensor_models(rng, 2)
    sig = common_architecture([m, r])
    out = subtract_reference(m, r, sig)
    for name in sig.names:
        a, b = m.get(name).data, r.get(name).data
        assert out[name].tolist() == [float(a[i]) - float(b[i]) for i in range(len(a))]


def test_subtract_reference_shape_mismatch():
    m = ModelWeights.from_arrays({"t": np.ones(2)})
    r = ModelWeights.from_arrays({"t": np.ones(3)})
    with pytest.raises(ArchitectureError):
        subtract_reference(m, r, common_architecture([m]))


def test_tensor_norm_examples():
    assert tensor_norm(np.array([1.0, -1, 1, -1])).tolist() == [1, -1, 1, -1]
    assert tensor_norm(np.array([2.0, -2, 2, -2])).tolist() == [1, -1, 1, -1]
    with pytest.raises(DegenerateTensorError):
        tensor_norm(np.array([5.0, 5, 5]))


@given(arrays(np.float64, st.integers(2, 40), elements=finite), st.floats(1e-3, 1e3))
@settings(max_examples=200, deadline=None)
def test_tensor_norm_unit_std_and_scale_invariance(x, c):
    if np.std(x) <= 1e-6:
        return
    y = tensor_norm(x)
    assert np.std(y) == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(tensor_norm(c * x), y, rtol=1e-9, atol=1e-9)


def test_model_norm():
    assert model_norm(np.array([2.0, -2.0])).tolist() == [1.0, -1.0]
    x = np.random.default_rng(1).normal(size=100) * 7 + 3
    assert np.std(model_norm(x)) == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(model_norm(3 * x), model_norm(x), rtol=1e-12)


def test_sort_tensor_example_and_multiset_oracle():
    assert sort_tensor(np.array([3.0, 1.0, 2.0])).tolist() == [1.0, 2.0, 3.0]
    x = np.random.default_rng(2).integers(0, 6, size=200).astype(float)
    s = sort_tensor(x)
    assert Counter(s.tolist()) == Counter(x.tolist())
    assert all(a <= b for a, b in zip(s, s[1:]))


def test_build_matrix_single_sorted_example():
    m = ModelWeights.from_arrays({"t": np.array([3.0, 1.0, 2.0])})
    fm = build_feature_matrix([m], PreprocessConfig(norm_method="none", sorted=True))
    assert fm.values.tolist() == [[1.0, 2.0, 3.0]]
    assert [(c.tensor_name, c.position) for c in fm.columns] == [("t", 0), ("t", 1), ("t", 2)]


@pytest.mark.parametrize("norm", ["tensor", "model", "none"])
def test_sorted_rows_are_permutation_invariant(norm):
    rng = np.random.default_rng(3)
    models = two_tensor_models(rng, 3)
    cfg = PreprocessConfig(norm_method=norm, sorted=True)
    base = build_feature_matrix(models, cfg).values
    for _ in range(10):
        permuted = [
            ModelWeights.from_arrays({t.name: rng.permutation(t.data).reshape(t.shape) for t in m.tensors})
            for m in models
        ]
        assert np.array_equal(build_feature_matrix(permuted, cfg).values, base)


def test_norm_and_sort_commute():
    rng = np.random.default_rng(4)
    for m in two_tensor_models(rng, 5):
        for t in m.tensors:
            a = sort_tensor(tensor_norm(t))
            b = tensor_norm(sort_tensor(t))
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_reference_subtraction_is_affine_shift():
    rng = np.random.default_rng(5)
    models = two_tensor_models(rng, 4)
    ref = two_tensor_models(rng, 1)[0]
    raw = build_feature_matrix(models, PreprocessConfig(norm_method="none")).values
    shifted = build_feature_matrix(models, PreprocessConfig(reference=ref, norm_method="none")).values
    ref_row = build_feature_matrix([ref], PreprocessConfig(norm_method="none")).values[0]
    assert np.array_equal(shifted, raw - ref_row)


def test_degenerate_tensor_becomes_zeros():
    m = ModelWeights.from_arrays({"a": np.array([1.0, 2.0]), "frozen": np.full(3, 4.0)})
    row = build_feature_matrix([m], PreprocessConfig(norm_method="tensor")).values[0]
    assert row[2:].tolist() == [0.0, 0.0, 0.0]


def test_whitelist_restricts_and_orders_by_signature():
    rng = np.random.default_rng(6)
    models = two_tensor_models(rng, 2)
    cfg = PreprocessConfig(norm_method="none", tensor_whitelist=("b",))
    fm = build_feature_matrix(models, cfg)
    assert fm.values.shape == (2, 5)
    assert {c.tensor_name for c in fm.columns} == {"b"}
    with pytest.raises(ArchitectureError):
        resolve_signature(models, PreprocessConfig(tensor_whitelist=("zzz",)))


def test_config_validation():
    with pytest.raises(ValueError):
        PreprocessConfig(norm_method="l2")


def test_matrix_is_deterministic_and_float64():
    rng = np.random.default_rng(7)
    models = two_tensor_models(rng, 3)
    a = build_feature_matrix(models, PreprocessConfig())
    b = build_feature_matrix(models, PreprocessConfig())
    assert a.values.dtype == np.float64
    assert a.values.tobytes() == b.values.tobytes()


def test_flattener_estimator():
    rng = np.random.default_rng(8)
    models = two_tensor_models(rng, 3)
    fl = WeightFlattener(sorted=True).fit(models)
    X = fl.transform(models)
    assert X.shape == (3, 17) and fl.n_features_out_ == 17
    assert fl.get_feature_names_out()[0] == "a[0]"
    assert fl.get_params()["sorted"] is True
