"""Detection metrics: IoU, recall-point AP with scale buckets, false-alarm rate.

AP follows the recall-point formulation: with Q positives for a category, the
category AP at one IoU threshold is (1/Q) * sum over q=1..Q of the maximum
precision attained at recall >= q/Q. A 101-point variant is available behind
``interpolation="coco101"`` for parity with COCO tooling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Annotation, Box

EMPTY_SENTINEL = -1.0

# Area buckets: small < 32^2, medium in [32^2, 96^2], large > 96^2.
SMALL_MAX_AREA = 32.0**2
LARGE_MIN_AREA = 96.0**2

DEFAULT_IOU_THRESHOLDS = tuple(np.arange(0.50, 0.99, 0.05)[:10].round(2).tolist())


def iou(a: Box, b: Box) -> float:
    """Intersection-over-union of two boxes, in [0, 1]."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union


def boxes_to_array(boxes) -> np.ndarray:
    """Stack boxes into an [N, 4] center-format float64 array."""
    if len(boxes) == 0:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array(
        [[b.x_center, b.y_center, b.width, b.height] for b in boxes],
        dtype=np.float64,
    )


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix [N, M] between two [*, 4] center-format box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax1, ay1 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2
    ax2, ay2 = a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    bx1, by1 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2
    bx2, by2 = b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(ax1[:, None], bx1[None, :])
    ih = np.minimum(ay2[:, None], by2[None, :]) - np.maximum(ay1[:, None], by1[None, :])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


@dataclass
class MetricReport:
    ap: float
    ap50: float
    ap75: float
    ap_s: float
    ap_m: float
    ap_l: float
    ar_s: float
    ar_m: float
    ar_l: float
    false_alarm_rate: float
    per_category_ap: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "ap": self.ap,
            "ap50": self.ap50,
            "ap75": self.ap75,
            "ap_s": self.ap_s,
            "ap_m": self.ap_m,
            "ap_l": self.ap_l,
            "ar_s": self.ar_s,
            "ar_m": self.ar_m,
            "ar_l": self.ar_l,
            "false_alarm_rate": self.false_alarm_rate,
            "per_category_ap": {str(k): v for k, v in self.per_category_ap.items()},
        }
        return json.dumps(payload, indent=2)

    def save(self, path: str | Path):
        Path(path).write_text(self.to_json())


def _in_bucket(area: float, area_range: tuple[float, float] | None) -> bool:
    if area_range is None:
        return True
    lo, hi = area_range
    return lo <= area <= hi


def _match_category(
    dets: list[tuple[int, Box, float]],
    gts_by_image: dict[int, list[Box]],
    iou_thresh: float,
    area_range: tuple[float, float] | None,
):
    """Greedy matching of one category's detections at one IoU threshold.

    ``dets`` are (image_id, box, score) triples. Ground boxes outside the area
    bucket are "ignored": a detection matched to one is dropped from scoring,
    and an unmatched detection whose own area falls outside the bucket is
    dropped as well (the standard ignore rule). Returns (tp_flags sorted by
    descending score, number of counted positives).
    """
    counted: dict[int, list[bool]] = {}
    num_positive = 0
    for img_id, boxes in gts_by_image.items():
        flags = [_in_bucket(b.area, area_range) for b in boxes]
        counted[img_id] = flags
        num_positive += sum(flags)

    order = sorted(range(len(dets)), key=lambda i: (-dets[i][2], i))
    matched: dict[int, list[bool]] = {
        img_id: [False] * len(boxes) for img_id, boxes in gts_by_image.items()
    }
    tp_flags: list[bool] = []
    for i in order:
        img_id, box, _score = dets[i]
        gt_boxes = gts_by_image.get(img_id, [])
        best_j, best_iou = -1, iou_thresh
        best_ign_j, best_ign_iou = -1, iou_thresh
        for j, gt_box in enumerate(gt_boxes):
            if matched[img_id][j]:
                continue
            overlap = iou(box, gt_box)
            if counted[img_id][j]:
                if overlap > best_iou or (overlap == best_iou and best_j < 0):
                    best_j, best_iou = j, overlap
            else:
                if overlap > best_ign_iou or (overlap == best_ign_iou and best_ign_j < 0):
                    best_ign_j, best_ign_iou = j, overlap
        if best_j >= 0:
            matched[img_id][best_j] = True
            tp_flags.append(True)
        elif best_ign_j >= 0:
            matched[img_id][best_ign_j] = True  # matched an ignored gt: drop
        elif not _in_bucket(box.area, area_range):
            continue  # unmatched detection outside the bucket: drop
        else:
            tp_flags.append(False)
    return tp_flags, num_positive


def _ap_from_matches(tp_flags: list[bool], num_positive: int,
                     interpolation: str) -> tuple[float, float]:
    """(AP, max recall) for one category at one threshold."""
    if num_positive == 0:
        return EMPTY_SENTINEL, EMPTY_SENTINEL
    if not tp_flags:
        return 0.0, 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    fp = np.cumsum(~np.asarray(tp_flags, dtype=bool))
    recall = tp / num_positive
    precision = tp / (tp + fp)
    # Maximum precision attainable at each cutoff or beyond.
    prec_ceil = np.maximum.accumulate(precision[::-1])[::-1]
    if interpolation == "coco101":
        grid = np.linspace(0.0, 1.0, 101)
    else:
        grid = np.arange(1, num_positive + 1, dtype=np.float64) / num_positive
    idx = np.searchsorted(recall, grid, side="left")
    ap_val = float(
        np.mean(np.where(idx < len(prec_ceil), prec_ceil[np.minimum(idx, len(prec_ceil) - 1)], 0.0))
    )
    return ap_val, float(recall[-1])


def _mean_defined(values: list[float]) -> float:
    defined = [v for v in values if v != EMPTY_SENTINEL]
    return float(np.mean(defined)) if defined else EMPTY_SENTINEL


def compute_ap(
    detections: dict[int, list],
    gts: dict[int, list[Annotation]],
    iou_thresholds=DEFAULT_IOU_THRESHOLDS,
    interpolation: str = "q_points",
    area_range: tuple[float, float] | None = None,
):
    """COCO-style AP/AR over a set of images.

    ``detections`` maps image id to Detection-like objects (``box``,
    ``category_id``, ``score``); ``gts`` maps image id to annotations.
    Matching is greedy by descending score, one detection per ground box, per
    category and IoU threshold. Categories without ground truth get the -1
    sentinel and are excluded from averages.

    Returns a dict with keys ap, ap50, ap75, ar, per_category_ap.
    """
    if interpolation not in ("q_points", "coco101"):
        raise ValueError(f"unknown interpolation '{interpolation}'")
    categories = sorted(
        {ann.category_id for anns in gts.values() for ann in anns}
        | {d.category_id for dets in detections.values() for d in dets}
    )
    per_cat_ap: dict[int, float] = {}
    per_cat_ap50: dict[int, float] = {}
    per_cat_ap75: dict[int, float] = {}
    per_cat_ar: dict[int, float] = {}
    for cat in categories:
        cat_dets = [
            (img_id, d.box, d.score)
            for img_id, dets in detections.items()
            for d in dets
            if d.category_id == cat
        ]
        cat_gts = {
            img_id: [ann.box for ann in anns if ann.category_id == cat]
            for img_id, anns in gts.items()
        }
        aps, recalls = [], []
        for t in iou_thresholds:
            flags, num_pos = _match_category(cat_dets, cat_gts, t, area_range)
            ap_t, rec_t = _ap_from_matches(flags, num_pos, interpolation)
            aps.append(ap_t)
            recalls.append(rec_t)
            if abs(t - 0.50) < 1e-9:
                per_cat_ap50[cat] = ap_t
            if abs(t - 0.75) < 1e-9:
                per_cat_ap75[cat] = ap_t
        per_cat_ap[cat] = _mean_defined(aps)
        per_cat_ar[cat] = _mean_defined(recalls)

    return {
        "ap": _mean_defined(list(per_cat_ap.values())),
        "ap50": _mean_defined(list(per_cat_ap50.values())),
        "ap75": _mean_defined(list(per_cat_ap75.values())),
        "ar": _mean_defined(list(per_cat_ar.values())),
        "per_category_ap": per_cat_ap,
    }


def scale_bucket_metrics(
    detections: dict[int, list],
    gts: dict[int, list[Annotation]],
    iou_thresholds=DEFAULT_IOU_THRESHOLDS,
    interpolation: str = "q_points",
):
    """AP/AR restricted to the small / medium / large area buckets."""
    buckets = {
        "s": (0.0, np.nextafter(SMALL_MAX_AREA, 0.0)),
        "m": (SMALL_MAX_AREA, LARGE_MIN_AREA),
        "l": (np.nextafter(LARGE_MIN_AREA, np.inf), np.inf),
    }
    out = {}
    for tag, area_range in buckets.items():
        res = compute_ap(detections, gts, iou_thresholds, interpolation, area_range)
        out[f"ap_{tag}"] = res["ap"]
        out[f"ar_{tag}"] = res["ar"]
    return out


def false_alarm_rate_from_counts(tp: int, fp: int) -> float:
    """FP / (TP + FP); zero when there are no detections at all."""
    total = tp + fp
    if total == 0:
        return 0.0
    return fp / total


def false_alarm_rate(
    detections: dict[int, list],
    gts: dict[int, list[Annotation]],
    iou_thresh: float = 0.5,
    score_thresh: float = 0.3,
) -> float:
    """Fraction of false alarms among detections at a fixed operating point.

    Detections below ``score_thresh`` are dropped; the rest are greedily
    matched per category at ``iou_thresh`` (descending score, one detection
    per ground box).
    """
    tp = fp = 0
    categories = sorted(
        {ann.category_id for anns in gts.values() for ann in anns}
        | {d.category_id for dets in detections.values() for d in dets}
    )
    for cat in categories:
        cat_dets = [
            (img_id, d.box, d.score)
            for img_id, dets in detections.items()
            for d in dets
            if d.category_id == cat and d.score >= score_thresh
        ]
        cat_gts = {
            img_id: [ann.box for ann in anns if ann.category_id == cat]
            for img_id, anns in gts.items()
        }
        flags, _ = _match_category(cat_dets, cat_gts, iou_thresh, area_range=None)
        tp += sum(flags)
        fp += len(flags) - sum(flags)
    return false_alarm_rate_from_counts(tp, fp)


def evaluate(
    detections: dict[int, list],
    gts: dict[int, list[Annotation]],
    iou_thresholds=DEFAULT_IOU_THRESHOLDS,
    interpolation: str = "q_points",
    falarm_iou: float = 0.5,
    falarm_score: float = 0.3,
) -> MetricReport:
    """Full metric stack over one evaluation set."""
    overall = compute_ap(detections, gts, iou_thresholds, interpolation)
    buckets = scale_bucket_metrics(detections, gts, iou_thresholds, interpolation)
    falarm = false_alarm_rate(detections, gts, falarm_iou, falarm_score)
    return MetricReport(
        ap=overall["ap"],
        ap50=overall["ap50"],
        ap75=overall["ap75"],
        ap_s=buckets["ap_s"],
        ap_m=buckets["ap_m"],
        ap_l=buckets["ap_l"],
        ar_s=buckets["ar_s"],
        ar_m=buckets["ar_m"],
        ar_l=buckets["ar_l"],
        false_alarm_rate=falarm,
        per_category_ap=overall["per_category_ap"],
    )
