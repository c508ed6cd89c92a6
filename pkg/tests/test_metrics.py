import numpy as np
import pytest

from unia.metrics import ConfusionMatrix, score_masks
from unia.refine import IGNORE
from unia.tensor import ParameterError


def counting_oracle(pred, gt, num_labels):
    """Per-pixel confusion counting with explicit loops."""
    counts = np.zeros((num_labels, num_labels), dtype=int)
    for p, g in zip(pred.reshape(-1), gt.reshape(-1)):
        if g != IGNORE and p != IGNORE:
            counts[g, p] += 1
    return counts


def test_perfect_prediction():
    gt = np.array([[0, 1], [2, 1]])
    report = score_masks([gt], [gt], num_labels=3)
    assert report.miou == 1.0
    assert report.macro_dsc == 1.0
    assert report.mean_cr == 0.0


def test_cr_arithmetic_tp100_fp35():
    cm = ConfusionMatrix(2)
    cm.counts[1, 1] = 100   # true positives
    cm.counts[0, 1] = 35    # false positives
    cm.counts[0, 0] = 500
    report = cm.report()
    assert report.per_class_cr[0] == pytest.approx(0.35)


def test_confusion_matches_counting_oracle():
    rng = np.random.default_rng(0)
    cm = ConfusionMatrix(3)
    total_expected = np.zeros((3, 3), dtype=int)
    for _ in range(4):
        pred = rng.integers(0, 3, size=(8, 8))
        gt = rng.integers(0, 3, size=(8, 8))
        cm.update(pred, gt)
        total_expected += counting_oracle(pred, gt, 3)
    np.testing.assert_array_equal(cm.counts, total_expected)


def test_total_equals_non_ignored_gt_pixels():
    rng = np.random.default_rng(1)
    cm = ConfusionMatrix(3)
    gt = rng.integers(0, 3, size=(10, 10))
    gt[gt == 2] = IGNORE
    pred = rng.integers(0, 3, size=(10, 10))
    cm.update(pred, gt)
    assert cm.total() == int((gt != IGNORE).sum())


def test_relabeling_invariance():
    rng = np.random.default_rng(2)
    pred = rng.integers(0, 3, size=(12, 12))
    gt = rng.integers(0, 3, size=(12, 12))
    base = score_masks([pred], [gt], 3)

    # Swap labels 1 and 2 consistently in both masks.
    swap = {0: 0, 1: 2, 2: 1}
    pred2 = np.vectorize(swap.get)(pred)
    gt2 = np.vectorize(swap.get)(gt)
    other = score_masks([pred2], [gt2], 3)
    assert base.miou == pytest.approx(other.miou)
    assert base.macro_dsc == pytest.approx(other.macro_dsc)
    assert base.per_class_iou[1] == pytest.approx(other.per_class_iou[2])


def test_absent_class_excluded_from_macro_averages():
    gt = np.zeros((4, 4), dtype=int)       # background only
    pred = np.zeros((4, 4), dtype=int)
    pred[0, 0] = 1                          # spurious class-1 blob
    report = score_masks([pred], [gt], 3)
    assert report.per_class_iou[1] is None  # class 1 absent from GT
    assert report.per_class_iou[2] is None
    assert report.miou == pytest.approx(15 / 16)  # background IoU only
    assert report.per_class_cr[0] is None   # no TP for class 1


def test_prediction_abstention_costs_recall_not_precision():
    gt = np.full((2, 2), 1)
    pred = np.full((2, 2), 1)
    pred[0, 0] = IGNORE
    report = score_masks([pred], [gt], 2)
    assert report.tp[1] == 3
    assert report.fn[1] == 1
    assert report.fp[1] == 0
    assert report.per_class_iou[1] == pytest.approx(3 / 4)


def test_ignored_gt_pixels_do_not_count():
    gt = np.array([[1, IGNORE], [0, 1]])
    pred = np.array([[1, 1], [0, 1]])
    report = score_masks([pred], [gt], 2)
    assert report.miou == 1.0


def test_dice_and_iou_relationship():
    # Dice = 2 IoU / (1 + IoU) for every class.
    rng = np.random.default_rng(3)
    pred = rng.integers(0, 3, size=(16, 16))
    gt = rng.integers(0, 3, size=(16, 16))
    report = score_masks([pred], [gt], 3)
    for c in (1, 2):
        iou = report.per_class_iou[c]
        dice = report.per_class_dice[c - 1]
        assert dice == pytest.approx(2 * iou / (1 + iou))


def test_label_out_of_range_rejected():
    cm = ConfusionMatrix(2)
    with pytest.raises(ParameterError):
        cm.update(np.array([[5]]), np.array([[0]]))


def test_needs_two_labels():
    with pytest.raises(ParameterError):
        ConfusionMatrix(1)
