"""Detection metrics: average precision at 40 recall points, difficulty
splits by distance band, and the data-savings rate between learning curves.

AP follows the 40-recall-point convention: detections across all scenes are
swept in descending confidence, greedily matched one-to-one against
same-category ground truth at a BEV IoU threshold, and precision is sampled
at recalls {1/40, ..., 40/40} using right-interpolated (running max)
precision. Duplicate detections of one object count one true positive and
the rest false positives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from monolig.geometry import bev_iou

# distance bands (meters) mirroring an easy / moderate / hard reporting
# shape on synthetic data; bands are disjoint
DIFFICULTY_BANDS = {
    "easy": (0.0, 20.0),
    "mod": (20.0, 40.0),
    "hard": (40.0, math.inf),
}

N_RECALL_POINTS = 40


@dataclass
class PrPoint:
    recall: float
    precision: float
    score: float


def _sweep(detections_per_scene, gts_per_scene, iou_thresh):
    """Global confidence sweep; yields cumulative (tp, fp) per rank.

    gts are (box, category) pairs. Matching is greedy in score order:
    each detection takes the unmatched same-category ground-truth box of
    its scene with the highest IoU >= threshold.
    """
    flat = []
    for si, dets in enumerate(detections_per_scene):
        for di, d in enumerate(dets):
            flat.append((-d.p, si, di, d))
    flat.sort(key=lambda t: t[:3])

    matched = [set() for _ in gts_per_scene]
    points = []
    tp = fp = 0
    for _, si, _, d in flat:
        best_iou = 0.0
        best_gt = None
        for gi, (gbox, gcat) in enumerate(gts_per_scene[si]):
            if gi in matched[si] or gcat != d.category:
                continue
            iou = bev_iou(d.box, gbox)
            if iou >= iou_thresh and iou > best_iou:
                best_iou = iou
                best_gt = gi
        if best_gt is not None:
            matched[si].add(best_gt)
            tp += 1
        else:
            fp += 1
        points.append((tp, fp, d.p))
    return points


def pr_curve(detections_per_scene, gts_per_scene, iou_thresh) -> list:
    """PR points after each detection in the global confidence sweep."""
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must be in (0, 1], got {iou_thresh}")
    npos = sum(len(g) for g in gts_per_scene)
    points = _sweep(detections_per_scene, gts_per_scene, iou_thresh)
    return [
        PrPoint(recall=tp / npos, precision=tp / (tp + fp), score=score)
        for tp, fp, score in points
    ] if npos else []


def ap40(detections_per_scene, gts_per_scene, iou_thresh):
    """Average precision over 40 recall points.

    Returns None when there is no ground truth at all (the metric is
    undefined, which is reported as absent rather than zero).
    """
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must be in (0, 1], got {iou_thresh}")
    npos = sum(len(g) for g in gts_per_scene)
    if npos == 0:
        return None
    points = _sweep(detections_per_scene, gts_per_scene, iou_thresh)
    recalls = np.array([tp / npos for tp, _, _ in points])
    precisions = np.array([tp / (tp + fp) for tp, fp, _ in points])
    total = 0.0
    for k in range(1, N_RECALL_POINTS + 1):
        r = k / N_RECALL_POINTS
        mask = recalls >= r - 1e-12
        total += float(precisions[mask].max()) if mask.any() else 0.0
    return total / N_RECALL_POINTS


def _in_band(box, band) -> bool:
    lo, hi = band
    return lo <= box.ground_distance() < hi


def ap40_by_difficulty(detections_per_scene, gts_per_scene, iou_thresh) -> dict:
    """AP per distance band; detections are assigned to bands by their own
    predicted center distance."""
    out = {}
    for name, band in DIFFICULTY_BANDS.items():
        dets = [
            [d for d in dets_s if _in_band(d.box, band)]
            for dets_s in detections_per_scene
        ]
        gts = [
            [(b, c) for b, c in gts_s if _in_band(b, band)]
            for gts_s in gts_per_scene
        ]
        out[name] = ap40(dets, gts, iou_thresh)
    return out


# ---------------------------------------------------------------------------
# learning-curve comparison
# ---------------------------------------------------------------------------

def first_crossing(curve, threshold):
    """Smallest labeled fraction at which the curve reaches the threshold,
    linearly interpolating between consecutive points; None if never."""
    pts = sorted(curve)
    if not pts:
        return None
    if pts[0][1] >= threshold:
        return pts[0][0]
    for (f0, a0), (f1, a1) in zip(pts, pts[1:]):
        if a1 >= threshold:
            if a1 == a0:
                return f1
            t = (threshold - a0) / (a1 - a0)
            return f0 + t * (f1 - f0)
    return None


def data_savings(curve_a, curve_b, target: float, full_ap: float = 1.0):
    """Labeled-fraction gap between two learning curves at a target level.

    curve_a and curve_b are (labeled_fraction, ap) sequences; the target is
    a fraction of the fully-trained AP. Positive values mean curve_a
    reaches the level with that much less data than curve_b. Returns None
    if either curve never reaches the level (reported as unreached).
    """
    threshold = target * full_ap
    fa = first_crossing(curve_a, threshold)
    fb = first_crossing(curve_b, threshold)
    if fa is None or fb is None:
        return None
    return fb - fa
