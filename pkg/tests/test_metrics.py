import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ofattn.metrics import average_precision, compute_map
from oracles import average_precision_table


def test_perfect_ranking():
    assert average_precision([0.9, 0.1], [1, 0]) == 1.0


def test_positive_second():
    assert average_precision([0.1, 0.9], [1, 0]) == 0.5


def test_mean_of_two_classes():
    report = compute_map(np.array([[0.9, 0.1], [0.1, 0.9]]), np.array([[1, 1], [0, 0]]))
    assert report.per_class == {0: 1.0, 1: 0.5}
    assert report.mAP == 0.75


def test_ties_broken_by_index():
    # equal scores: sample 0 ranks first
    assert average_precision([0.5, 0.5], [1, 0]) == 1.0
    assert average_precision([0.5, 0.5], [0, 1]) == 0.5


def test_class_without_positives_is_excluded():
    report = compute_map(np.array([[0.2, 0.3], [0.8, 0.1]]), np.array([[0, 0], [1, 0]]))
    assert report.excluded == [1]
    assert report.mAP == report.per_class[0] == 1.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        compute_map(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        compute_map(np.zeros((3, 2)), np.zeros((3, 2)))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 20), st.integers(0, 2**32 - 1), st.booleans())
def test_matches_table_oracle(n, seed, coarse):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 4, (n, 5)) / 4 if coarse else rng.random((n, 5))
    labels = rng.integers(0, 2, (n, 5))
    if not labels.any():
        labels[0, 0] = 1
    report = compute_map(scores, labels)
    expected = {c: average_precision_table(scores[:, c].tolist(), labels[:, c].tolist())
                for c in range(5) if labels[:, c].any()}
    assert sorted(report.per_class) == sorted(expected)
    for c, ap in expected.items():
        assert report.per_class[c] == pytest.approx(ap, abs=1e-12)
    assert abs(report.mAP - np.mean(list(report.per_class.values()))) <= 1e-12
