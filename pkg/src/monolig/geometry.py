"""Oriented-box geometry in bird's-eye view.

Boxes live on the ground plane: the footprint of a box is the rectangle
spanned by (w, l), centered at (cx, cz), rotated by yaw about the vertical
axis. Height (h) and vertical center (cy) never enter overlap computations.

Provides rotated-rectangle IoU (convex polygon clipping + shoelace area),
per-category greedy non-maximum suppression, and one-to-one greedy
cross-set matching. All operations are pure and deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(theta):
    """Wrap an angle (scalar or array) to [-pi, pi)."""
    return (theta + math.pi) % TWO_PI - math.pi


@dataclass
class Box3D:
    """Oriented 3D bounding box with a 7-parameter encoding.

    Parameters
    ----------
    cx, cy, cz : float
        Center coordinates in meters. (cx, cz) is the ground-plane
        position, cy the vertical center.
    w, h, l : float
        Width (x extent at yaw=0), height (vertical), length (z extent
        at yaw=0), all positive, in meters.
    yaw : float
        Heading about the vertical axis, radians; stored wrapped to
        [-pi, pi).
    """

    cx: float
    cy: float
    cz: float
    w: float
    h: float
    l: float
    yaw: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0 and self.l > 0):
            raise ValueError(
                f"box dims must be positive, got w={self.w} h={self.h} l={self.l}"
            )
        self.yaw = float(wrap_angle(self.yaw))

    def to_array(self) -> np.ndarray:
        return np.array(
            [self.cx, self.cy, self.cz, self.w, self.h, self.l, self.yaw],
            dtype=float,
        )

    @classmethod
    def from_array(cls, a) -> "Box3D":
        a = np.asarray(a, dtype=float)
        if a.shape != (7,):
            raise ValueError(f"expected 7 box parameters, got shape {a.shape}")
        return cls(*(float(v) for v in a))

    def footprint(self) -> np.ndarray:
        """Counterclockwise footprint corners, shape (4, 2), in the (x, z) plane."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hw, hl = 0.5 * self.w, 0.5 * self.l
        corners = np.array(
            [[-hw, -hl], [hw, -hl], [hw, hl], [-hw, hl]], dtype=float
        )
        rot = np.array([[c, -s], [s, c]])
        return corners @ rot.T + np.array([self.cx, self.cz])

    def footprint_area(self) -> float:
        return self.w * self.l

    def ground_distance(self) -> float:
        """Distance from the sensor origin to the box center on the ground plane."""
        return math.hypot(self.cx, self.cz)


@dataclass
class ScoredBox:
    """A box with a confidence score and a category label."""

    box: Box3D
    score: float
    category: int

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")


@dataclass
class MatchResult:
    """Outcome of one-to-one greedy matching between two box sets.

    pairs holds (reference index, candidate index, iou) triples; every
    index appears at most once and every recorded iou is >= the threshold
    the match was run with.
    """

    pairs: list = field(default_factory=list)
    unmatched_reference: list = field(default_factory=list)
    unmatched_candidate: list = field(default_factory=list)


def _polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a polygon given as (n, 2) vertices."""
    if len(poly) < 3:
        return 0.0
    x = poly[:, 0]
    z = poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(z, 1)) - np.dot(z, np.roll(x, 1))))


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of `subject` against convex `clip`.

    Both polygons must be counterclockwise. Points on a clip edge count
    as inside, so a polygon clipped against itself is returned unchanged.
    """
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, az = clip[i]
        bx, bz = clip[(i + 1) % n]
        ex, ez = bx - ax, bz - az

        def inside(p):
            return ex * (p[1] - az) - ez * (p[0] - ax) >= 0.0

        input_list = output
        output = []
        s = input_list[-1]
        s_in = inside(s)
        for e in input_list:
            e_in = inside(e)
            if e_in != s_in:
                # edge crossing: intersect segment s-e with the clip line
                dx, dz = e[0] - s[0], e[1] - s[1]
                denom = ex * dz - ez * dx
                if denom != 0.0:
                    t = (ex * (s[1] - az) - ez * (s[0] - ax)) / -denom
                    output.append((s[0] + t * dx, s[1] + t * dz))
            if e_in:
                output.append(e)
            s, s_in = e, e_in
    return np.array(output, dtype=float) if output else np.empty((0, 2))


def _bev_iou_ordered(a: Box3D, b: Box3D) -> float:
    fa = a.footprint()
    fb = b.footprint()
    # shoelace areas throughout so identical boxes divide to exactly 1.0
    area_a = _polygon_area(fa)
    area_b = _polygon_area(fb)
    if area_a <= 1e-12 or area_b <= 1e-12:
        return 0.0
    inter = _polygon_area(_clip_polygon(fa, fb))
    union = area_a + area_b - inter
    if union <= 1e-12:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Bird's-eye-view IoU of two oriented boxes.

    The rotated footprints are intersected by convex polygon clipping and
    the overlap measured with the shoelace formula. Vertical extent is
    ignored. Near-degenerate footprints contribute zero overlap.

    Returns
    -------
    float
        Ratio in [0, 1]; exactly symmetric in its arguments.
    """
    # canonical argument order makes iou(a, b) bit-identical to iou(b, a)
    ka = (a.cx, a.cz, a.w, a.l, a.yaw)
    kb = (b.cx, b.cz, b.w, b.l, b.yaw)
    if kb < ka:
        a, b = b, a
    return _bev_iou_ordered(a, b)


def nms_indices(dets: list, iou_thresh: float) -> list:
    """Indices surviving per-category greedy NMS, in descending score order.

    Ties in score are broken by lower input index so the result is
    deterministic.
    """
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must be in (0, 1], got {iou_thresh}")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept = []
    for i in order:
        suppressed = False
        for j in kept:
            if dets[j].category != dets[i].category:
                continue
            if bev_iou(dets[j].box, dets[i].box) >= iou_thresh:
                suppressed = True
                break
        if not suppressed:
            kept.append(i)
    return kept


def nms(dets: list, iou_thresh: float) -> list:
    """Per-category greedy non-maximum suppression.

    Parameters
    ----------
    dets : list of ScoredBox
    iou_thresh : float
        Overlap at or above which a lower-scored box of the same category
        is suppressed; must lie in (0, 1].

    Returns
    -------
    list of ScoredBox
        Survivors sorted by descending score. Every suppressed box
        overlaps some higher-scored survivor of its category at >= the
        threshold.
    """
    return [dets[i] for i in nms_indices(dets, iou_thresh)]


def match_sets(reference: list, candidate: list, iou_thresh: float) -> MatchResult:
    """One-to-one greedy matching between two sets of scored boxes.

    Candidate pairs are restricted to equal categories and IoU >= the
    threshold, then accepted greedily in descending IoU order (ties broken
    by lower reference index, then lower candidate index).

    Parameters
    ----------
    reference, candidate : list of ScoredBox
    iou_thresh : float
        Minimum BEV IoU for a pair, in (0, 1].

    Returns
    -------
    MatchResult
    """
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must be in (0, 1], got {iou_thresh}")
    pairs = []
    for i, r in enumerate(reference):
        for j, c in enumerate(candidate):
            if r.category != c.category:
                continue
            iou = bev_iou(r.box, c.box)
            if iou >= iou_thresh:
                pairs.append((iou, i, j))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))

    used_ref = set()
    used_cand = set()
    accepted = []
    for iou, i, j in pairs:
        if i in used_ref or j in used_cand:
            continue
        used_ref.add(i)
        used_cand.add(j)
        accepted.append((i, j, iou))
    return MatchResult(
        pairs=accepted,
        unmatched_reference=[i for i in range(len(reference)) if i not in used_ref],
        unmatched_candidate=[j for j in range(len(candidate)) if j not in used_cand],
    )
