import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import brute_force_auc, random_binary_instance
from weightdetect.metrics import (
    cross_entropy,
    curve_area,
    evaluate,
    roc_auc,
    roc_auc_columns,
    roc_curve,
    write_metrics,
    write_roc_csv,
)


def test_perfect_and_reversed_separation():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0


def test_all_tied_scores_give_half():
    assert roc_auc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_single_class_rejected():
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [0, 2])


@pytest.mark.parametrize("levels", [None, 3, 10])
def test_auc_matches_pairwise_oracle(levels):
    rng = np.random.default_rng(levels or 0)
    for _ in range(200):
        s, y = random_binary_instance(rng, tie_levels=levels)
        assert roc_auc(s, y) == pytest.approx(brute_force_auc(s, y), abs=1e-12)


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 1)), min_size=2, max_size=30))
@settings(max_examples=200, deadline=None)
def test_auc_properties(pairs):
    s = np.array([p[0] for p in pairs], float)
    y = np.array([p[1] for p in pairs])
    if y.min() == y.max():
        return
    a = roc_auc(s, y)
    assert 0.0 <= a <= 1.0
    assert roc_auc(-s, y) == pytest.approx(1.0 - a, abs=1e-12)
    assert roc_auc(np.exp(s), y) == pytest.approx(a, abs=1e-12)


def test_columns_agree_with_scalar():
    rng = np.random.default_rng(3)
    X = rng.integers(0, 4, size=(25, 7)).astype(float)
    y = np.r_[np.zeros(12, int), np.ones(13, int)]
    expect = [roc_auc(X[:, j], y) for j in range(7)]
    np.testing.assert_allclose(roc_auc_columns(X, y), expect, atol=1e-15)


def test_cross_entropy_values():
    assert cross_entropy([0.5, 0.5], [0, 1]) == pytest.approx(math.log(2), abs=1e-12)
    assert cross_entropy([0.8], [1]) == pytest.approx(0.223144, abs=1e-6)
    # clamped at 1e-7: -ln(1e-7)
    assert cross_entropy([0.0], [1]) == pytest.approx(16.1181, abs=1e-4)
    assert cross_entropy([1.0], [0]) == pytest.approx(16.1181, abs=1e-4)
    assert math.isfinite(cross_entropy([0.0, 1.0], [1, 0]))


def test_roc_curve_with_ties_steps_diagonally():
    pts = roc_curve([0.5, 0.5], [0, 1])
    assert pts == [(0.0, 0.0), (1.0, 1.0)]


@pytest.mark.parametrize("levels", [None, 4])
def test_curve_area_equals_auc(levels):
    rng = np.random.default_rng(9)
    for _ in range(200):
        s, y = random_binary_instance(rng, tie_levels=levels)
        pts = roc_curve(s, y)
        assert pts[0] == (0.0, 0.0) and pts[-1] == (1.0, 1.0)
        assert all(a[0] <= b[0] and a[1] <= b[1] for a, b in zip(pts, pts[1:]))
        assert curve_area(pts) == pytest.approx(roc_auc(s, y), abs=1e-12)


def test_report_files(tmp_path):
    rep = evaluate([0.2, 0.7, 0.9], [0, 1, 1])
    write_metrics(tmp_path / "m.json", rep, {"flags": {"seed": 1}})
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["auc"] == 1.0 and doc["n_pos"] == 2 and doc["n_neg"] == 1
    assert doc["flags"] == {"seed": 1}
    write_roc_csv(tmp_path / "roc.csv", roc_curve([0.2, 0.7, 0.9], [0, 1, 1]))
    rows = list(csv.reader(open(tmp_path / "roc.csv")))
    assert rows[0] == ["fpr", "tpr"]
    assert rows[-1] == ["1.0", "1.0"]
