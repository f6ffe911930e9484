import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meshfuse.metrics import (
    MetricError,
    auc_trapezoid,
    classification_metrics,
    fpr_at_tpr,
    regression_metrics,
    roc_curve,
    tpr_at_fpr,
    write_roc_csv,
)


def _auc_pair_counting(scores, labels):
    """Mann-Whitney statistic: P(score_pos > score_neg) with ties counting half."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def _operating_points_exhaustive(scores, labels):
    """TPR/FPR at every distinct threshold (score >= t is positive)."""
    pts = [(0.0, 0.0)]
    npos = (labels == 1).sum()
    nneg = (labels == 0).sum()
    for t in np.unique(scores)[::-1]:
        pred = scores >= t
        pts.append(
            (
                ((pred == 1) & (labels == 0)).sum() / nneg,
                ((pred == 1) & (labels == 1)).sum() / npos,
            )
        )
    return pts


def test_regression_metrics_hand_case():
    m = regression_metrics([1.0, 2.0, 4.0], [1.0, 3.0, 5.0])
    assert m["mae"] == pytest.approx(2.0 / 3.0)
    # R2 = 1 - SSE/SST = 1 - 2/8
    assert m["r2"] == pytest.approx(0.75)


def test_regression_metrics_validation():
    with pytest.raises(MetricError):
        regression_metrics([1.0], [1.0])
    with pytest.raises(MetricError):
        regression_metrics([1.0, 2.0], [3.0, 3.0])  # constant targets
    with pytest.raises(MetricError):
        regression_metrics([1.0, 2.0], [1.0, 2.0, 3.0])


def test_roc_curve_hand_case():
    scores = np.array([0.9, 0.8, 0.7, 0.6])
    labels = np.array([1, 0, 1, 0])
    curve = roc_curve(scores, labels)
    np.testing.assert_allclose(curve.fpr, [0.0, 0.0, 0.5, 0.5, 1.0])
    np.testing.assert_allclose(curve.tpr, [0.0, 0.5, 0.5, 1.0, 1.0])
    assert curve.thresholds[0] == np.inf
    assert auc_trapezoid(curve) == pytest.approx(0.75)


def test_roc_curve_groups_ties():
    scores = np.array([0.5, 0.5, 0.5, 0.1])
    labels = np.array([1, 0, 1, 0])
    curve = roc_curve(scores, labels)
    # one point for the tied threshold, then the final point
    np.testing.assert_allclose(curve.fpr, [0.0, 0.5, 1.0])
    np.testing.assert_allclose(curve.tpr, [0.0, 1.0, 1.0])


def test_roc_requires_both_classes():
    with pytest.raises(MetricError):
        roc_curve([0.1, 0.2], [1, 1])


def test_auc_equals_pair_counting_statistic():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = 200
        labels = (rng.uniform(size=n) < 0.5).astype(int)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = np.round(rng.normal(size=n) + labels, 1)  # rounding makes ties
        curve = roc_curve(scores, labels)
        assert auc_trapezoid(curve) == pytest.approx(
            _auc_pair_counting(scores, labels), abs=1e-12
        )


def test_operating_points_equal_exhaustive_enumeration():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = 200
        labels = (rng.uniform(size=n) < 0.5).astype(int)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = np.round(rng.normal(size=n) + 0.8 * labels, 1)
        curve = roc_curve(scores, labels)
        pts = _operating_points_exhaustive(scores, labels)
        for f in (0.15, 0.20):
            want = max(tpr for fpr, tpr in pts if fpr <= f)
            assert tpr_at_fpr(curve, f) == pytest.approx(want, abs=1e-12)
        want = min(fpr for fpr, tpr in pts if tpr >= 0.70)
        assert fpr_at_tpr(curve, 0.70) == pytest.approx(want, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_auc_pair_counting_property(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 60))
    labels = np.zeros(n, dtype=int)
    labels[: int(rng.integers(1, n))] = 1
    rng.shuffle(labels)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    scores = rng.integers(0, 5, size=n).astype(float)  # heavy ties
    curve = roc_curve(scores, labels)
    assert auc_trapezoid(curve) == pytest.approx(
        _auc_pair_counting(scores, labels), abs=1e-12
    )


def test_perfect_and_inverted_separation():
    labels = np.array([0, 0, 1, 1])
    curve = roc_curve(np.array([0.1, 0.2, 0.8, 0.9]), labels)
    assert auc_trapezoid(curve) == 1.0
    assert tpr_at_fpr(curve, 0.15) == 1.0
    assert fpr_at_tpr(curve, 0.70) == 0.0
    inverted = roc_curve(np.array([0.9, 0.8, 0.2, 0.1]), labels)
    assert auc_trapezoid(inverted) == 0.0


def test_classification_metrics_keys():
    m = classification_metrics([0.9, 0.1, 0.8, 0.3], [1, 0, 1, 0])
    assert set(m) == {"auc", "tpr_at_fpr_0.15", "tpr_at_fpr_0.20", "fpr_at_tpr_0.70"}


def test_write_roc_csv(tmp_path):
    curve = roc_curve(np.array([0.9, 0.1]), np.array([1, 0]))
    path = tmp_path / "roc.csv"
    write_roc_csv(curve, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "threshold,fpr,tpr"
    assert len(lines) == 1 + curve.fpr.size
