import numpy as np
import pytest

import scalecomp as sc
from scalecomp.detector import Detection
from conftest import random_boxes
from oracles import (
    ap_single_category_oracle,
    iou_oracle,
    rasterized_iou_oracle,
)


class TestIoU:
    def test_identity(self):
        box = sc.Box(10, 12, 6, 8)
        assert sc.iou(box, box) == 1.0

    def test_disjoint(self):
        assert sc.iou(sc.Box(5, 5, 2, 2), sc.Box(50, 50, 2, 2)) == 0.0

    def test_one_seventh_case(self):
        a, b = sc.Box(1, 1, 2, 2), sc.Box(2, 2, 2, 2)
        assert sc.iou(a, b) == pytest.approx(1 / 7, abs=1e-12)
        assert rasterized_iou_oracle(a, b) == pytest.approx(1 / 7, abs=2e-3)

    def test_symmetry_random(self, rng):
        for _ in range(50):
            a, b = random_boxes(rng, 2)
            assert sc.iou(a, b) == pytest.approx(sc.iou(b, a), abs=1e-12)
            assert sc.iou(a, b) == pytest.approx(iou_oracle(a, b), abs=1e-12)

    def test_pairwise_matches_scalar(self, rng):
        a = random_boxes(rng, 7)
        b = random_boxes(rng, 5)
        mat = sc.pairwise_iou(sc.metrics.boxes_to_array(a), sc.metrics.boxes_to_array(b))
        for i in range(7):
            for j in range(5):
                assert mat[i, j] == pytest.approx(sc.iou(a[i], b[j]), abs=1e-12)


def _det(box, cat, score):
    return Detection(box=box, category_id=cat, score=score)


class TestComputeAP:
    def test_perfect_single_detection(self):
        gt = sc.Annotation(sc.Box(20, 20, 10, 10), 0)
        dets = {0: [_det(sc.Box(20, 20, 10, 10), 0, 0.9)]}
        res = sc.compute_ap(dets, {0: [gt]})
        assert res["ap"] == 1.0
        assert res["ap50"] == 1.0
        assert res["ap75"] == 1.0

    def test_no_detections(self):
        gt = sc.Annotation(sc.Box(20, 20, 10, 10), 0)
        res = sc.compute_ap({0: []}, {0: [gt]})
        assert res["ap"] == 0.0

    def test_hand_enumerated_case(self):
        # Two gts; detections: TP at 0.9, FP at 0.8, TP at 0.7.
        gts = {0: [sc.Annotation(sc.Box(10, 10, 8, 8), 0),
                   sc.Annotation(sc.Box(40, 40, 8, 8), 0)]}
        dets = {0: [
            _det(sc.Box(10, 10, 8, 8), 0, 0.9),
            _det(sc.Box(25, 25, 2, 2), 0, 0.8),
            _det(sc.Box(40, 40, 8, 8), 0, 0.7),
        ]}
        res = sc.compute_ap(dets, gts, iou_thresholds=(0.5,))
        assert res["ap"] == pytest.approx((1 + 2 / 3) / 2, abs=1e-9)

    def test_matches_oracle_random(self, rng):
        for trial in range(100):
            n_gt = int(rng.integers(1, 6))
            n_det = int(rng.integers(0, 12))
            gt_boxes = random_boxes(rng, n_gt)
            gts = {0: [sc.Annotation(b, 0) for b in gt_boxes]}
            dets = []
            for _ in range(n_det):
                if rng.random() < 0.6 and n_gt:
                    src = gt_boxes[int(rng.integers(n_gt))]
                    box = sc.Box(src.x_center + rng.normal(0, 1.5),
                                 src.y_center + rng.normal(0, 1.5),
                                 max(src.width * rng.uniform(0.7, 1.3), 1.0),
                                 max(src.height * rng.uniform(0.7, 1.3), 1.0))
                else:
                    box = random_boxes(rng, 1)[0]
                dets.append(_det(box, 0, float(rng.random())))
            got = sc.compute_ap({0: dets}, gts, iou_thresholds=(0.5,))
            want = ap_single_category_oracle(
                [(0, d.box, d.score) for d in dets], {0: gt_boxes}, 0.5
            )
            assert got["ap"] == pytest.approx(want, abs=1e-6), f"trial {trial}"

    def test_monotone_score_transform_invariance(self, rng):
        gt_boxes = random_boxes(rng, 4)
        gts = {0: [sc.Annotation(b, 0) for b in gt_boxes]}
        dets = [_det(b, 0, float(rng.uniform(0.1, 0.9))) for b in random_boxes(rng, 8)]
        dets += [_det(b, 0, float(rng.uniform(0.1, 0.9))) for b in gt_boxes]
        base = sc.compute_ap({0: dets}, gts)["ap"]
        squashed = [_det(d.box, d.category_id, d.score**3 / 2) for d in dets]
        assert sc.compute_ap({0: squashed}, gts)["ap"] == pytest.approx(base, abs=1e-12)

    def test_deleting_fp_never_decreases_ap(self, rng):
        for _ in range(20):
            gt_boxes = random_boxes(rng, 3)
            gts = {0: [sc.Annotation(b, 0) for b in gt_boxes]}
            dets = [_det(b, 0, float(rng.uniform(0.5, 1.0))) for b in gt_boxes]
            fp = _det(sc.Box(60, 60, 3, 3), 0, float(rng.uniform(0.1, 0.95)))
            with_fp = sc.compute_ap({0: dets + [fp]}, gts)["ap"]
            without = sc.compute_ap({0: dets}, gts)["ap"]
            assert without >= with_fp - 1e-12

    def test_deleting_tp_never_increases_ap(self, rng):
        gt_boxes = random_boxes(rng, 3)
        gts = {0: [sc.Annotation(b, 0) for b in gt_boxes]}
        dets = [_det(b, 0, 0.9 - 0.1 * i) for i, b in enumerate(gt_boxes)]
        full = sc.compute_ap({0: dets}, gts)["ap"]
        pruned = sc.compute_ap({0: dets[:-1]}, gts)["ap"]
        assert pruned <= full + 1e-12

    def test_missing_category_sentinel(self):
        gts = {0: [sc.Annotation(sc.Box(10, 10, 4, 4), 0)]}
        dets = {0: [_det(sc.Box(10, 10, 4, 4), 0, 0.9),
                    _det(sc.Box(30, 30, 4, 4), 1, 0.8)]}
        res = sc.compute_ap(dets, gts)
        assert res["per_category_ap"][1] == -1.0
        assert res["ap"] == 1.0  # category 1 excluded from the mean


class TestScaleBuckets:
    def test_bucket_boundaries(self):
        gts = {0: [sc.Annotation(sc.Box(20, 20, 10, 10), 0)]}  # area 100: small
        dets = {0: [_det(sc.Box(20, 20, 10, 10), 0, 0.9)]}
        out = sc.scale_bucket_metrics(dets, gts)
        assert out["ap_s"] == 1.0
        assert out["ap_m"] == -1.0
        assert out["ap_l"] == -1.0

    def test_perfect_every_bucket(self):
        boxes = [sc.Box(20, 20, 10, 10), sc.Box(60, 60, 50, 50),
                 sc.Box(150, 150, 120, 120)]
        gts = {0: [sc.Annotation(b, 0) for b in boxes]}
        dets = {0: [_det(b, 0, 0.9) for b in boxes]}
        out = sc.scale_bucket_metrics(dets, gts)
        assert out["ap_s"] == 1.0 and out["ap_m"] == 1.0 and out["ap_l"] == 1.0
        assert out["ar_s"] == 1.0 and out["ar_m"] == 1.0 and out["ar_l"] == 1.0

    def test_matches_bucket_filtered_rerun(self, rng):
        # Well-separated gts so each detection overlaps at most one gt; then
        # the ignore rule coincides with filtering both sides by bucket.
        for _ in range(10):
            gt_boxes = []
            for i in range(4):
                size = rng.uniform(8, 20) if i % 2 == 0 else rng.uniform(40, 80)
                gt_boxes.append(sc.Box(100 + 200 * i, 100, size, size))
            gts = {0: [sc.Annotation(b, 0) for b in gt_boxes]}
            dets = [
                _det(sc.Box(b.x_center + rng.normal(0, 1), b.y_center,
                            b.width, b.height), 0, float(rng.uniform(0.2, 1.0)))
                for b in gt_boxes
            ]
            out = sc.scale_bucket_metrics({0: dets}, gts, iou_thresholds=(0.5,))

            small = [i for i, b in enumerate(gt_boxes) if b.area < 32**2]
            filtered_gts = {0: [sc.Annotation(gt_boxes[i], 0) for i in small]}
            filtered_dets = {0: [dets[i] for i in small]}
            want = sc.compute_ap(filtered_dets, filtered_gts, iou_thresholds=(0.5,))
            assert out["ap_s"] == pytest.approx(want["ap"], abs=1e-9)


class TestFalseAlarm:
    def test_table_arithmetic(self):
        assert sc.false_alarm_rate_from_counts(894, 106) == 0.106

    def test_zero_fp(self):
        assert sc.false_alarm_rate_from_counts(10, 0) == 0.0

    def test_no_detections(self):
        gts = {0: [sc.Annotation(sc.Box(10, 10, 4, 4), 0)]}
        assert sc.false_alarm_rate({0: []}, gts) == 0.0

    def test_matches_counting_oracle(self, rng):
        for _ in range(25):
            gt_boxes = random_boxes(rng, int(rng.integers(1, 5)))
            gts = {0: [sc.Annotation(b, 0) for b in gt_boxes]}
            dets = []
            for b in gt_boxes:
                if rng.random() < 0.8:
                    dets.append(_det(b, 0, float(rng.uniform(0.3, 1.0))))
            n_fp = int(rng.integers(0, 4))
            for _ in range(n_fp):
                dets.append(_det(sc.Box(200 + rng.uniform(0, 50), 200, 5, 5), 0,
                                 float(rng.uniform(0.3, 1.0))))
            got = sc.false_alarm_rate({0: dets}, gts, iou_thresh=0.5, score_thresh=0.3)
            # Oracle: greedy descending-score matching, one detection per gt.
            matched = set()
            tp = 0
            for d in sorted(dets, key=lambda d: -d.score):
                candidates = [
                    (iou_oracle(d.box, g), j)
                    for j, g in enumerate(gt_boxes)
                    if j not in matched and iou_oracle(d.box, g) >= 0.5
                ]
                if candidates:
                    matched.add(max(candidates, key=lambda c: (c[0], -c[1]))[1])
                    tp += 1
            fp = len(dets) - tp
            want = fp / (tp + fp) if dets else 0.0
            assert got == pytest.approx(want, abs=1e-12)


def test_report_serialization(tmp_path):
    report = sc.MetricReport(ap=0.5, ap50=0.7, ap75=0.4, ap_s=0.2, ap_m=0.5,
                             ap_l=-1.0, ar_s=0.3, ar_m=0.6, ar_l=-1.0,
                             false_alarm_rate=0.106, per_category_ap={0: 0.5})
    path = tmp_path / "metrics.json"
    report.save(path)
    import json

    payload = json.loads(path.read_text())
    assert set(payload) == {
        "ap", "ap50", "ap75", "ap_s", "ap_m", "ap_l",
        "ar_s", "ar_m", "ar_l", "false_alarm_rate", "per_category_ap",
    }
    assert payload["false_alarm_rate"] == 0.106
