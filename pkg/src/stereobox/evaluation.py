"""Rotated-box IoU in the ground plane, 3D IoU, and average precision.

Matching and bucketing follow the KITTI devkit conventions: detections
are matched greedily in descending score order, each ground truth
matches at most once, ground truths harder than the requested difficulty
are ignored (they absorb detections without counting either way), and AP
interpolates precision at 11 (default) or 40 equally spaced recall
thresholds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box3D
from .kitti import Difficulty, ObjectRecord, difficulty_of

AREA_EPS = 1e-12


@dataclass(frozen=True)
class BevBox:
    """Bird's-eye-view rectangle: center (x, z), extents (w, l), yaw theta."""

    x: float
    z: float
    w: float
    l: float
    theta: float

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0):
            raise ValueError(f"extents must be positive, got {(self.w, self.l)}")

    def corners(self) -> np.ndarray:
        """The four corners, counter-clockwise, as a (4, 2) array of (x, z)."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        local = np.array(
            [[self.w / 2, self.l / 2], [-self.w / 2, self.l / 2],
             [-self.w / 2, -self.l / 2], [self.w / 2, -self.l / 2]]
        )
        xs = self.x + local[:, 0] * c + local[:, 1] * s
        zs = self.z - local[:, 0] * s + local[:, 1] * c
        return np.column_stack([xs, zs])

    @property
    def area(self) -> float:
        return self.w * self.l


@dataclass(frozen=True)
class PRCurve:
    """Recall/precision points with the score threshold producing each."""

    recalls: np.ndarray
    precisions: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.recalls) < 0):
            raise ValueError("recall must be non-decreasing along the curve")


@dataclass(frozen=True)
class APResult:
    ap: float | None
    curve: PRCurve | None
    n_gt: int


def _polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a polygon given as an (n, 2) vertex array."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y)))


def _clip_halfplane(poly: list, a: np.ndarray, b: np.ndarray) -> list:
    """Keep the part of poly on the left of the directed edge a -> b."""
    if not poly:
        return poly
    edge = b - a
    out = []
    prev = poly[-1]
    prev_side = edge[0] * (prev[1] - a[1]) - edge[1] * (prev[0] - a[0])
    for cur in poly:
        cur_side = edge[0] * (cur[1] - a[1]) - edge[1] * (cur[0] - a[0])
        if cur_side >= 0:
            if prev_side < 0:
                t = prev_side / (prev_side - cur_side)
                out.append(prev + t * (cur - prev))
            out.append(cur)
        elif prev_side >= 0:
            t = prev_side / (prev_side - cur_side)
            out.append(prev + t * (cur - prev))
        prev, prev_side = cur, cur_side
    return out


def convex_intersection_area(pa: np.ndarray, pb: np.ndarray) -> float:
    """Area of the intersection of two convex polygons (successive clipping)."""
    poly = [p for p in pa]
    if _signed_area(pb) < 0:
        pb = pb[::-1]
    for i in range(len(pb)):
        poly = _clip_halfplane(poly, pb[i], pb[(i + 1) % len(pb)])
        if not poly:
            return 0.0
    area = _polygon_area(np.array(poly))
    return area if area > AREA_EPS else 0.0


def _signed_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def bev_iou(a: BevBox, b: BevBox) -> float:
    """Intersection over union of two rotated ground-plane rectangles."""
    inter = convex_intersection_area(a.corners(), b.corners())
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def iou3d(a: Box3D, b: Box3D) -> float:
    """3D IoU of two gravity-aligned boxes: BEV intersection x height overlap."""
    inter_bev = convex_intersection_area(_bev_of(a).corners(), _bev_of(b).corners())
    lo = max(a.y - a.h / 2, b.y - b.h / 2)
    hi = min(a.y + a.h / 2, b.y + b.h / 2)
    inter = inter_bev * max(0.0, hi - lo)
    union = a.w * a.h * a.l + b.w * b.h * b.l - inter
    return inter / union if union > 0 else 0.0


def _bev_of(box: Box3D) -> BevBox:
    return BevBox(box.x, box.z, box.w, box.l, box.theta)


def record_box3d(rec: ObjectRecord) -> Box3D:
    h, w, l = rec.dims
    x, y, z = rec.location
    return Box3D(x, y, z, w, h, l, rec.rotation_y)


def bev_iou_records(a: ObjectRecord, b: ObjectRecord) -> float:
    ba, bb = record_box3d(a), record_box3d(b)
    return bev_iou(_bev_of(ba), _bev_of(bb))


def iou3d_records(a: ObjectRecord, b: ObjectRecord) -> float:
    return iou3d(record_box3d(a), record_box3d(b))


def _interp_ap(recalls, precisions, n_points: int, include_zero: bool) -> float:
    if include_zero:
        thresholds = np.linspace(0.0, 1.0, n_points)
    else:
        thresholds = (np.arange(n_points) + 1) / n_points
    ap = 0.0
    for r in thresholds:
        mask = recalls >= r - 1e-12
        ap += float(precisions[mask].max()) if mask.any() else 0.0
    return ap / n_points


def average_precision(
    dets: dict[str, list[ObjectRecord]],
    gts: dict[str, list[ObjectRecord]],
    iou_fn,
    iou_thresh: float,
    difficulty: Difficulty,
    mode: str = "11",
    class_name: str = "Car",
) -> APResult:
    """KITTI-style AP over per-image record sets.

    Ground truths with difficulty_of beyond the requested bucket (buckets
    are cumulative: Easy within Moderate within Hard) are ignored:
    detections matching them are dropped from scoring, unmatched ones
    count neither as TP nor FN. Returns ap=None when no image holds an
    in-bucket ground truth (AP is undefined, never silently 0).

    mode selects 11-point (thresholds 0, 0.1, .., 1) or 40-point
    (1/40 .. 1) precision interpolation.
    """
    if mode not in ("11", "40"):
        raise ValueError(f"mode must be '11' or '40', got {mode!r}")

    events = []  # (score, order, is_tp)
    n_gt = 0
    order = 0
    for frame in sorted(set(dets) | set(gts)):
        frame_gts = [g for g in gts.get(frame, []) if g.cls == class_name]
        active = [g for g in frame_gts if difficulty_of(g) <= difficulty]
        ignored = [g for g in frame_gts if difficulty_of(g) > difficulty]
        n_gt += len(active)

        frame_dets = [d for d in dets.get(frame, []) if d.cls == class_name]
        if any(d.score is None for d in frame_dets):
            raise ValueError(f"frame {frame}: detection without a score")
        ranked = sorted(enumerate(frame_dets), key=lambda t: (-t[1].score, t[0]))

        matched = [False] * len(active)
        matched_ign = [False] * len(ignored)
        for _, det in ranked:
            best_iou, best_j = iou_thresh, -1
            for j, gt in enumerate(active):
                if matched[j]:
                    continue
                iou = iou_fn(det, gt)
                if iou >= best_iou:
                    best_iou, best_j = iou, j
            if best_j >= 0:
                matched[best_j] = True
                events.append((det.score, order, True))
            else:
                absorbed = False
                for j, gt in enumerate(ignored):
                    if not matched_ign[j] and iou_fn(det, gt) >= iou_thresh:
                        matched_ign[j] = True
                        absorbed = True
                        break
                if not absorbed:
                    events.append((det.score, order, False))
            order += 1

    if n_gt == 0:
        return APResult(ap=None, curve=None, n_gt=0)
    if not events:
        empty = PRCurve(np.zeros(0), np.zeros(0), np.zeros(0))
        return APResult(ap=0.0, curve=empty, n_gt=n_gt)

    events.sort(key=lambda e: (-e[0], e[1]))
    scores = np.array([e[0] for e in events])
    tp = np.cumsum([1 if e[2] else 0 for e in events])
    fp = np.cumsum([0 if e[2] else 1 for e in events])
    recalls = tp / n_gt
    precisions = tp / np.maximum(tp + fp, 1)

    ap = _interp_ap(recalls, precisions, 11 if mode == "11" else 40, include_zero=mode == "11")
    return APResult(ap=ap, curve=PRCurve(recalls, precisions, scores), n_gt=n_gt)


@dataclass(frozen=True)
class APTableRow:
    metric: str
    class_name: str
    difficulty: str
    iou_thresh: float
    ap: float | None


def evaluate_all(
    dets: dict[str, list[ObjectRecord]],
    gts: dict[str, list[ObjectRecord]],
    iou_thresholds=(0.5, 0.7),
    mode: str = "11",
    class_name: str = "Car",
) -> list[APTableRow]:
    """AP_BEV and AP_3D for every (difficulty, IoU threshold) pair."""
    rows = []
    for metric, fn in (("AP_BEV", bev_iou_records), ("AP_3D", iou3d_records)):
        for thresh in iou_thresholds:
            for diff in (Difficulty.EASY, Difficulty.MODERATE, Difficulty.HARD):
                res = average_precision(dets, gts, fn, thresh, diff, mode, class_name)
                rows.append(APTableRow(metric, class_name, diff.name.lower(), thresh, res.ap))
    return rows


def format_ap_table(rows: list[APTableRow]) -> str:
    """Tab-separated AP table; values in percent, 'n/a' when undefined."""
    lines = ["metric\tclass\tdifficulty\tthreshold\tAP"]
    for row in rows:
        ap = "n/a" if row.ap is None else f"{100.0 * row.ap:.2f}"
        lines.append(f"{row.metric}\t{row.class_name}\t{row.difficulty}\t{row.iou_thresh}\t{ap}")
    return "\n".join(lines) + "\n"
