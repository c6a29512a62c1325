import warnings

import numpy as np
import pytest

from oracles import brute_confusion, brute_fp_fn, brute_miou, brute_pxap_piou, brute_seed_prediction
from mctloc import metrics
from mctloc.errors import ShapeError
from mctloc.metrics import THRESHOLDS


def random_case(rng, c=3, n=8):
    gt = rng.integers(0, c + 1, (n, n))
    pred = gt.copy()
    flip = rng.random((n, n)) < rng.random()
    pred[flip] = rng.integers(0, c + 1, int(flip.sum()))
    return pred, gt


class TestMiou:
    def test_half_overlap(self):
        gt = np.zeros((2, 4), int)
        gt[:, :2] = 1
        pred = np.zeros((2, 4), int)
        pred[:, 1:3] = 1
        iou, m = metrics.miou(pred, gt, 1)
        # foreground: 2 shared pixels over 6 in the union; background likewise
        assert iou[1] == pytest.approx(1 / 3)
        assert iou[0] == pytest.approx(1 / 3)
        assert m == pytest.approx(1 / 3)

    def test_perfect(self):
        gt = np.random.default_rng(0).integers(0, 4, (8, 8))
        assert metrics.miou(gt, gt, 3)[1] == 1.0

    def test_absent_labels_excluded(self):
        gt = np.array([[0, 1], [1, 0]])
        iou, m = metrics.miou(gt, gt, 4)
        assert np.isnan(iou[2:]).all()
        assert m == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            metrics.confusion(np.zeros((2, 2), int), np.zeros((3, 2), int), 2)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            pred, gt = random_case(rng)
            assert metrics.confusion(pred, gt, 4).tolist() == brute_confusion(pred, gt, 4)
            assert metrics.miou(pred, gt, 3)[1] == brute_miou(pred, gt, 3)
            assert metrics.fp_fn(pred, gt) == brute_fp_fn(pred, gt)


class TestFpFn:
    def test_hand_case(self):
        gt = np.array([[0, 1], [2, 0]])
        pred = np.array([[1, 1], [1, 0]])
        # (0,0) background predicted as fg -> FP; (1,0) class 2 predicted as 1 -> FP and FN
        assert metrics.fp_fn(pred, gt) == (0.5, 0.25)

    def test_empty(self):
        assert metrics.fp_fn_from_confusion(np.zeros((3, 3), int)) == (0.0, 0.0)


class TestPxapPiou:
    def test_perfect_scores(self):
        gt = np.zeros((4, 4), bool)
        gt[:2] = True
        piou, pxap = metrics.pxap_piou(gt.astype(float), gt)
        assert piou == 1.0 and pxap == 1.0

    def test_constant_scores(self):
        gt = np.zeros((4, 4), bool)
        gt[0] = True
        piou, pxap = metrics.pxap_piou(np.full((4, 4), 0.5), gt)
        # every threshold up to 0.5 predicts everything: precision 1/4 at recall 1
        assert piou == 0.25
        assert pxap == pytest.approx((1 + 0.25) / 2)

    def test_no_positives(self):
        with pytest.raises(ValueError):
            metrics.pxap_piou(np.zeros((2, 2)), np.zeros((2, 2), bool))

    def test_threshold_counts_hand(self):
        tp, fp, npos = metrics.threshold_counts(np.array([0.0, 0.5, 1.0]), np.array([1, 0, 1]), np.array([0.0, 0.5, 0.75]))
        assert tp.tolist() == [2, 1, 1] and fp.tolist() == [1, 1, 0] and npos == 2

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            scores = np.round(rng.random((8, 8)), int(rng.integers(1, 4)))
            gt = rng.random((8, 8)) < 0.4
            if not gt.any():
                continue
            assert metrics.pxap_piou(scores, gt) == brute_pxap_piou(scores, gt, THRESHOLDS)

    def test_classwise_skips_empty_class(self):
        maps = np.random.default_rng(3).random((2, 2, 4, 4))
        masks = np.ones((2, 4, 4), int)
        labels = np.array([[1, 0], [1, 0]])
        with pytest.warns(UserWarning, match="class 1"):
            piou, pxap = metrics.classwise_pxap_piou(maps, masks, labels)
        assert 0 < piou <= 1 and 0 < pxap <= 1


class TestSeedPrediction:
    def test_threshold_to_background(self):
        maps = np.array([[[0.2, 0.5]], [[0.3, 0.4]]])
        pred = metrics.seed_prediction(maps, np.array([1, 1]), tau=0.35)
        assert pred.tolist() == [[0, 1]]

    def test_filter_excludes_absent_class(self):
        maps = np.array([[[0.9]], [[0.5]]])
        assert metrics.seed_prediction(maps, np.array([0, 1]))[0, 0] == 2

    def test_tie_goes_to_lower_class(self):
        maps = np.full((3, 1, 1), 0.6)
        assert metrics.seed_prediction(maps, None)[0, 0] == 1

    def test_matches_brute_force(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            maps = np.round(rng.random((3, 8, 8)), 1)
            present = (rng.random(3) < 0.6).astype(int)
            pred = metrics.seed_prediction(maps, present, 0.35)
            assert pred.tolist() == brute_seed_prediction(maps, present, 0.35)


class TestAccumulator:
    def test_batches_add_up(self):
        rng = np.random.default_rng(5)
        maps = rng.random((6, 3, 8, 8))
        masks = rng.integers(0, 4, (6, 8, 8))
        labels = np.ones((6, 3))
        whole = metrics.SeedAccumulator(3)
        whole.add(maps, masks, labels)
        split = metrics.SeedAccumulator(3)
        split.add(maps[:2], masks[:2], labels[:2])
        split.add(maps[2:], masks[2:], labels[2:])
        a, b = whole.report(), split.report()
        assert a.miou == b.miou and a.fp == b.fp and a.pxap == b.pxap

    def test_report_row(self):
        acc = metrics.SeedAccumulator(2, tau=0.5)
        acc.add(np.zeros((1, 2, 4, 4)), np.zeros((1, 4, 4), int), np.ones((1, 2)))
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            row = acc.report(kind="x").row()
        assert row["kind"] == "x" and row["tau"] == 0.5 and row["miou"] == 1.0
        assert np.isnan(row["piou"])
