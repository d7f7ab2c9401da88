from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inharmony import metrics


def oracle_ap(levels, gt):
    """Exact interpolated AP: every threshold k/255, pixel-by-pixel counts, rational arithmetic."""
    levels, gt = np.asarray(levels).reshape(-1).tolist(), np.asarray(gt).reshape(-1).tolist()
    n_pos = sum(gt)
    points = []
    for k in range(255, -1, -1):
        tp = sum(1 for q, g in zip(levels, gt) if q >= k and g)
        pp = sum(1 for q in levels if q >= k)
        precision = Fraction(tp, pp) if pp else Fraction(1)
        points.append((Fraction(tp, n_pos), precision))
    ap, prev_recall = Fraction(0), Fraction(0)
    for i, (recall, _) in enumerate(points):
        best = max(p for _, p in points[i:])
        ap += (recall - prev_recall) * best
        prev_recall = recall
    return ap


def oracle_f1_iou(binary, gt):
    tp = fp = fn = 0
    for b, g in zip(binary.reshape(-1), gt.reshape(-1)):
        tp += bool(b and g)
        fp += bool(b and not g)
        fn += bool(g and not b)
    if tp + fp + fn == 0:
        return Fraction(1), Fraction(1)
    return Fraction(2 * tp, 2 * tp + fp + fn), Fraction(tp, tp + fp + fn)


def random_case(rng, size=4):
    levels = rng.integers(0, 256, (size, size))
    gt = rng.random((size, size)) < rng.uniform(0.1, 0.9)
    if not gt.any():
        gt[rng.integers(size), rng.integers(size)] = True
    return levels, gt.astype(np.uint8)


class TestAveragePrecision:
    def test_perfect(self):
        gt = np.zeros((6, 6), np.uint8)
        gt[1:4, 2:5] = 1
        assert metrics.average_precision(gt.astype(float), gt) == 1.0

    def test_inverted_prediction_gives_prevalence(self):
        gt = np.zeros((4, 4), np.uint8)
        gt[:2, :3] = 1
        assert metrics.average_precision(1.0 - gt, gt) == pytest.approx(6 / 16, abs=1e-12)
        assert oracle_ap(metrics.quantize(1.0 - gt), gt) == Fraction(6, 16)

    def test_random_6x6_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            levels, gt = random_case(rng, 6)
            got = metrics.average_precision(levels / 255.0, gt)
            assert abs(got - float(oracle_ap(levels, gt))) <= 1e-9

    def test_frozen_ranking_example(self):
        # levels 200, 100, 50, 0 over gt 1, 0, 1, 0: PR points (1/2, 1), (1/2, 1/2), (1, 2/3), (1, 1/2)
        pred = np.array([200, 100, 50, 0]) / 255.0
        gt = np.array([1, 0, 1, 0])
        assert metrics.average_precision(pred, gt) == pytest.approx(0.5 * 1 + 0.5 * 2 / 3, abs=1e-12)

    def test_empty_gt(self):
        with pytest.raises(ValueError, match="undefined"):
            metrics.average_precision(np.zeros(4), np.zeros(4))

    def test_quantization(self):
        assert metrics.quantize([0.0, 0.5 / 255, 1.0, 1.7, -0.2]).tolist() == [0, 0, 255, 255, 0]

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1), data=st.data())
    def test_invariant_to_increasing_maps(self, seed, data):
        rng = np.random.default_rng(seed)
        levels, gt = random_case(rng, 5)
        # strictly increasing map from the levels present onto other 8-bit levels
        n_used = data.draw(st.integers(2, 256))
        targets = np.sort(rng.choice(256, size=n_used, replace=False))
        used = np.unique(levels)
        if len(used) > n_used:
            return
        mapping = dict(zip(used, targets[np.sort(rng.choice(n_used, size=len(used), replace=False))]))
        mapped = np.vectorize(mapping.get)(levels)
        a = metrics.average_precision(levels / 255.0, gt)
        b = metrics.average_precision(mapped / 255.0, gt)
        assert a == b


class TestF1IoU:
    def test_identical(self):
        gt = np.array([[1, 0], [1, 1]])
        assert metrics.f1_iou(gt.astype(float), gt) == (1.0, 1.0)

    def test_hand_count(self):
        # TP = 2, FP = 2, FN = 0
        gt = np.array([1, 1, 0, 0, 0, 0])
        pred = np.array([1, 1, 1, 1, 0, 0], dtype=float)
        f1, iou = metrics.f1_iou(pred, gt)
        assert f1 == pytest.approx(4 / 6) and iou == 0.5

    def test_disjoint(self):
        assert metrics.f1_iou(np.array([1.0, 0.0]), np.array([0, 1])) == (0.0, 0.0)

    def test_both_empty(self):
        assert metrics.f1_iou(np.zeros(4), np.zeros(4)) == (1.0, 1.0)

    def test_threshold_is_inclusive(self):
        assert metrics.f1_iou(np.array([0.5]), np.array([1])) == (1.0, 1.0)

    @pytest.mark.parametrize("t", [0.0, 1.0])
    def test_threshold_range(self, t):
        with pytest.raises(ValueError):
            metrics.f1_iou(np.zeros(2), np.zeros(2), threshold=t)

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1))
    def test_f1_iou_relation(self, seed):
        rng = np.random.default_rng(seed)
        pred, gt = rng.random(25), (rng.random(25) < 0.4).astype(int)
        f1, iou = metrics.f1_iou(pred, gt)
        assert 0 <= iou <= f1 <= 1
        assert f1 == pytest.approx(2 * iou / (1 + iou), abs=1e-12)


def test_oracle_equivalence_200_cases():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        levels, gt = random_case(rng)
        pred = levels / 255.0
        ap = metrics.average_precision(pred, gt)
        assert abs(ap - float(oracle_ap(levels, gt))) <= 1e-12
        f1, iou = metrics.f1_iou(pred, gt)
        ref_f1, ref_iou = oracle_f1_iou(levels >= 128, gt)
        assert (f1, iou) == (float(ref_f1), float(ref_iou))


class TestAggregate:
    def test_single(self):
        rep = metrics.aggregate([(0.7, 0.6, 0.5)])
        assert (rep.ap, rep.f1, rep.iou, rep.n_images) == (0.7, 0.6, 0.5, 1)

    def test_two(self):
        rep = metrics.aggregate([(1.0, 1.0, 1.0), (0.0, 0.0, 0.0)])
        assert (rep.ap, rep.f1, rep.iou) == (0.5, 0.5, 0.5)

    def test_skipped_ap(self):
        rep = metrics.aggregate([(None, 1.0, 1.0), (0.4, 0.5, 0.2)])
        assert rep.ap == 0.4 and rep.n_ap_skipped == 1 and rep.f1 == 0.75

    def test_recompute_100(self):
        rng = np.random.default_rng(1)
        rows = [metrics.image_metrics(rng.random((6, 6)), (rng.random((6, 6)) < 0.3).astype(int)) for _ in range(100)]
        rep = metrics.aggregate(rows)
        aps = [r[0] for r in rows if r[0] is not None]
        assert rep.ap == pytest.approx(sum(aps) / len(aps), abs=1e-12)
        assert rep.iou == pytest.approx(sum(r[2] for r in rows) / 100, abs=1e-12)

    def test_pooled_differs_from_per_image(self):
        preds = [np.array([0.9, 0.1]), np.array([0.2, 0.8])]
        gts = [np.array([1, 0]), np.array([1, 0])]
        assert metrics.pooled_average_precision(preds, gts) != np.mean(
            [metrics.average_precision(p, g) for p, g in zip(preds, gts)])

    def test_csv_and_table(self):
        rep = metrics.aggregate([(1.0, 0.5, 1 / 3)])
        lines = rep.to_csv().splitlines()
        assert lines[0] == "metric,value" and lines[1] == "ap,1.0" and lines[3] == f"iou,{1 / 3!r}"
        assert "iou" in rep.to_table()
