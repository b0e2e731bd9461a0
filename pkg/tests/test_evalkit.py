"""IoU metrics against counting oracles, and the domain-gap estimator."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaseg.errors import ValidationError
from adaseg.evalkit import (ConfusionMatrix, GapEstimate, bound_report, confusion,
                            domain_gap_estimate, iou_per_class, miou)

RNG = np.random.default_rng(55)


def oracle_confusion(pred, gt, k):
    counts = np.zeros((k, k), dtype=np.int64)
    for p, g in zip(pred.ravel(), gt.ravel()):
        counts[g, p] += 1
    return counts


def test_confusion_perfect_prediction_is_diagonal():
    gt = RNG.integers(0, 3, size=(8, 8))
    cm = confusion(gt, gt, 3)
    assert np.array_equal(cm.counts, np.diag(np.bincount(gt.ravel(), minlength=3)))


def test_confusion_complement_is_antidiagonal():
    gt = RNG.integers(0, 2, size=(8, 8))
    cm = confusion(1 - gt, gt, 2)
    assert cm.counts[0, 0] == 0 and cm.counts[1, 1] == 0
    assert cm.counts.sum() == 64


def test_confusion_matches_counting_oracle():
    for _ in range(5):
        pred = RNG.integers(0, 4, size=(8, 8))
        gt = RNG.integers(0, 4, size=(8, 8))
        cm = confusion(pred, gt, 4)
        assert np.array_equal(cm.counts, oracle_confusion(pred, gt, 4))


def test_confusion_ignore_index():
    gt = np.array([[0, 255], [1, 1]])
    pred = np.array([[0, 0], [1, 0]])
    cm = confusion(pred, gt, 2, ignore_index=255)
    assert cm.counts.sum() == 3


def test_confusion_rejects_bad_labels():
    with pytest.raises(ValidationError):
        confusion(np.array([0, 5]), np.array([0, 1]), 2)


def test_iou_paper_table_anchors():
    """Published two-class rows: the mean of the per-class IoUs."""
    assert miou([0.7447, 0.3265]) * 100 == pytest.approx(53.56, abs=0.005)
    assert miou([0.8548, 0.4367]) * 100 == pytest.approx(64.58, abs=0.005)


def test_iou_perfect_prediction():
    gt = RNG.integers(0, 3, size=(8, 8))
    cm = confusion(gt, gt, 3)
    ious = iou_per_class(cm)
    present = ~np.isnan(ious)
    assert np.allclose(ious[present], 1.0)
    assert miou(cm) == pytest.approx(1.0)


def test_iou_matches_pixel_oracle():
    pred = RNG.integers(0, 3, size=(8, 8))
    gt = RNG.integers(0, 3, size=(8, 8))
    cm = confusion(pred, gt, 3)
    ious = iou_per_class(cm)
    for k in range(3):
        inter = np.sum((pred == k) & (gt == k))
        union = np.sum((pred == k) | (gt == k))
        if union:
            assert ious[k] == pytest.approx(inter / union, abs=1e-12)


def test_miou_of_two_class_matrix_is_mean_of_both():
    for _ in range(5):
        cm = ConfusionMatrix(RNG.integers(1, 50, size=(2, 2)))
        ious = iou_per_class(cm)
        assert miou(cm) == pytest.approx((ious[0] + ious[1]) / 2, abs=1e-12)


def test_miou_excludes_absent_classes():
    counts = np.zeros((3, 3), dtype=int)
    counts[0, 0] = 10
    counts[1, 1] = 5
    counts[1, 0] = 5
    cm = ConfusionMatrix(counts)
    ious = iou_per_class(cm)
    assert np.isnan(ious[2])
    assert miou(cm) == pytest.approx((ious[0] + ious[1]) / 2)


def test_miou_all_absent_raises():
    with pytest.raises(ValidationError):
        miou([np.nan, np.nan])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_confusion_total_preserved(seed):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, 3, size=(6, 6))
    gt = rng.integers(0, 3, size=(6, 6))
    assert confusion(pred, gt, 3).counts.sum() == 36


# ---------------------------------------------------------------------------
# domain gap
# ---------------------------------------------------------------------------

def blobs(n, d, center, rng, sigma=1.0):
    return rng.normal(0, sigma, size=(n, d)) + np.asarray(center)


def test_gap_identical_sets_near_zero():
    feats = RNG.normal(size=(60, 8))
    gap = domain_gap_estimate(feats, feats.copy(), n_seeds=10)
    assert gap.d_hat < 0.2


def test_gap_separated_blobs_near_two():
    rng = np.random.default_rng(2)
    fs = blobs(60, 6, np.r_[2.0, np.zeros(5)], rng)
    ft = blobs(60, 6, np.r_[-2.0, np.zeros(5)], rng)  # 4 sigma apart -> separable
    gap = domain_gap_estimate(fs, ft)
    assert gap.d_hat > 1.6
    assert gap.classifier_error < 0.05


def test_gap_invariant_under_identical_permutation():
    rng = np.random.default_rng(3)
    fs = blobs(40, 5, np.ones(5), rng)
    ft = blobs(40, 5, -np.ones(5), rng)
    base = domain_gap_estimate(fs, ft)
    perm = rng.permutation(40)
    permuted = domain_gap_estimate(fs[perm], ft[perm])
    assert base.d_hat == pytest.approx(permuted.d_hat, abs=1e-12)


def test_gap_requires_enough_samples():
    small = RNG.normal(size=(10, 4))
    with pytest.raises(ValidationError):
        domain_gap_estimate(small, small)


def test_gap_triangle_inequality_on_blobs():
    """d(s,t) <= d(s,g) + d(t,g) + slack for Gaussian blobs vs standard normal."""
    for seed in range(3):
        rng = np.random.default_rng(100 + seed)
        fs = blobs(50, 6, np.r_[2.0, np.zeros(5)], rng)
        ft = blobs(50, 6, np.r_[-2.0, np.zeros(5)], rng)
        g = rng.normal(size=(50, 6))
        d_st = domain_gap_estimate(fs, ft, seed=seed).d_hat
        d_sg = domain_gap_estimate(fs, g, seed=seed).d_hat
        d_tg = domain_gap_estimate(ft, g, seed=seed).d_hat
        assert d_st <= d_sg + d_tg + 0.15


def test_gap_estimate_invariants():
    with pytest.raises(ValidationError):
        GapEstimate(d_hat=1.0, classifier_error=0.7)
    with pytest.raises(ValidationError):
        GapEstimate(d_hat=1.0, classifier_error=0.1)  # inconsistent pair
    ok = GapEstimate(d_hat=2.0 * (1 - 2 * 0.1), classifier_error=0.1)
    assert 0.0 <= ok.d_hat <= 2.0


def test_bound_report_states_unestimated_constant():
    gap = GapEstimate(d_hat=0.8, classifier_error=(1 - 0.8 / 2) / 2)
    rep = bound_report(0.05, gap)
    assert rep["upper_bound_excluding_constant"] == pytest.approx(0.05 + 0.4)
    assert "unestimated" in rep["note"]
