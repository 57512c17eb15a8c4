"""Training-target encoders and loss formulas for the anchor-free detector.

Pure functions only: gaussian center heatmaps, the penalty-reduced focal
loss, the stereo box offset/size encoding anchored on the left-image box
center, L1, and the weighted multi-task sum. No training loop lives here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Rect


class RectificationError(ValueError):
    """Left/right boxes violate the rectified vertical-alignment constraint."""


@dataclass(frozen=True)
class TargetConfig:
    """Heatmap geometry and loss shape parameters.

    r is the downsampling factor between image pixels and heatmap cells;
    width/height are heatmap dims in cells. min_overlap drives the
    gaussian radius rule; focal_a/focal_b are the focal-loss exponents.
    """

    r: int
    width: int
    height: int
    n_classes: int
    min_overlap: float = 0.7
    focal_a: float = 2.0
    focal_b: float = 4.0

    def __post_init__(self):
        if self.r < 1:
            raise ValueError(f"downsampling factor must be >= 1, got {self.r}")
        if self.n_classes < 1:
            raise ValueError(f"need at least one class, got {self.n_classes}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"bad heatmap dims ({self.width}, {self.height})")


@dataclass(frozen=True)
class StereoBox2D:
    """Encoded stereo 2D box: one heatmap cell plus offsets and sizes (cells).

    o_ul / o_ur are the horizontal offsets from the cell to the left- and
    right-image box centers, o_v the shared vertical offset; w_l / w_r the
    two box widths and h the shared height.
    """

    cell: tuple[int, int]
    o_ul: float
    o_ur: float
    o_v: float
    w_l: float
    w_r: float
    h: float

    def __post_init__(self):
        if not (self.w_l > 0 and self.w_r > 0 and self.h > 0):
            raise ValueError(f"sizes must be positive, got {(self.w_l, self.w_r, self.h)}")


@dataclass(frozen=True)
class LossWeights:
    w_cls: float = 1.0
    w_off: float = 1.0
    w_size: float = 1.0
    w_dim: float = 1.0
    w_theta: float = 1.0
    w_kpts: float = 1.0
    w_depth: float = 1.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"{name} must be non-negative, got {value}")


@dataclass(frozen=True)
class LossParts:
    cls: float
    off: float
    size: float
    dim: float
    theta: float
    kpts: float
    depth: float


def gaussian_radius(size_cells: tuple[float, float], min_overlap: float = 0.7) -> float:
    """Radius keeping any shifted box above min_overlap IoU with the original.

    The rule solves three quadratic overlap cases for a (h, w) box and
    keeps the smallest root.
    """
    h, w = size_cells
    a1 = 1.0
    b1 = h + w
    c1 = w * h * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 - math.sqrt(b1**2 - 4 * a1 * c1)) / (2 * a1)

    a2 = 4.0
    b2 = 2 * (h + w)
    c2 = (1 - min_overlap) * w * h
    r2 = (b2 - math.sqrt(b2**2 - 4 * a2 * c2)) / (2 * a2)

    a3 = 4.0 * min_overlap
    b3 = -2 * min_overlap * (h + w)
    c3 = (min_overlap - 1) * w * h
    r3 = (-b3 + math.sqrt(b3**2 - 4 * a3 * c3)) / (2 * a3)
    return min(r1, r2, r3)


def gaussian_heatmap(
    centers: list[tuple[tuple[int, int], int, tuple[float, float]]],
    cfg: TargetConfig,
) -> np.ndarray:
    """Splat gaussian peaks onto a (n_classes, height, width) heatmap.

    Each entry is ((cell_u, cell_v), class_id, (box_w, box_h) in cells).
    sigma follows the min-overlap radius rule (sigma = (2r + 1)/6) and
    overlapping splats combine by elementwise max, so every center cell
    holds exactly 1.
    """
    hm = np.zeros((cfg.n_classes, cfg.height, cfg.width))
    for (cu, cv), cls, size in centers:
        if not (0 <= cu < cfg.width and 0 <= cv < cfg.height):
            raise ValueError(f"center cell ({cu}, {cv}) outside heatmap "
                             f"({cfg.width} x {cfg.height})")
        if not 0 <= cls < cfg.n_classes:
            raise ValueError(f"class id {cls} outside [0, {cfg.n_classes})")
        radius = max(0, int(gaussian_radius((size[1], size[0]), cfg.min_overlap)))
        sigma = (2 * radius + 1) / 6.0
        u0, u1 = max(0, cu - radius), min(cfg.width - 1, cu + radius)
        v0, v1 = max(0, cv - radius), min(cfg.height - 1, cv + radius)
        uu, vv = np.meshgrid(np.arange(u0, u1 + 1) - cu, np.arange(v0, v1 + 1) - cv)
        splat = np.exp(-(uu**2 + vv**2) / (2 * sigma**2))
        region = hm[cls, v0 : v1 + 1, u0 : u1 + 1]
        np.maximum(region, splat, out=region)
    return hm


def focal_loss(pred: np.ndarray, target: np.ndarray, cfg: TargetConfig) -> float:
    """Penalty-reduced focal loss for gaussian heatmaps.

    Peak cells (target == 1) contribute -(1-p)^a*log(p); the rest
    contribute -(1-t)^b*p^a*log(1-p). Normalized by the peak count.
    Predictions must lie strictly inside (0, 1); callers clamp.
    """
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if np.any(pred <= 0) or np.any(pred >= 1):
        raise ValueError("predictions must be strictly inside (0, 1)")
    peaks = target == 1.0
    pos = -((1.0 - pred[peaks]) ** cfg.focal_a) * np.log(pred[peaks])
    neg = (
        -((1.0 - target[~peaks]) ** cfg.focal_b)
        * (pred[~peaks] ** cfg.focal_a)
        * np.log(1.0 - pred[~peaks])
    )
    n = max(int(peaks.sum()), 1)
    return float((pos.sum() + neg.sum()) / n)


def encode_stereo_targets(left_box: Rect, right_box: Rect, cfg: TargetConfig) -> StereoBox2D:
    """Encode a rectified stereo box pair against the left-anchored heatmap.

    The heatmap cell is floor(left center / r); offsets and sizes are in
    heatmap cells. The pair must be vertically aligned within 0.5 px.
    """
    if abs(left_box.center_v - right_box.center_v) > 0.5:
        raise RectificationError(
            f"vertical centers differ by {abs(left_box.center_v - right_box.center_v):.3f} px"
        )
    r = float(cfg.r)
    cell_u = math.floor(left_box.center_u / r)
    cell_v = math.floor(left_box.center_v / r)
    return StereoBox2D(
        cell=(cell_u, cell_v),
        o_ul=left_box.center_u / r - cell_u,
        o_ur=right_box.center_u / r - cell_u,
        o_v=left_box.center_v / r - cell_v,
        w_l=left_box.width / r,
        w_r=right_box.width / r,
        h=left_box.height / r,
    )


def decode_stereo_targets(sb: StereoBox2D, cfg: TargetConfig) -> tuple[Rect, Rect]:
    """Invert encode_stereo_targets; the shared height goes to both views."""
    r = float(cfg.r)
    cu, cv = sb.cell
    u_l = (cu + sb.o_ul) * r
    u_r = (cu + sb.o_ur) * r
    v = (cv + sb.o_v) * r
    half_h = 0.5 * sb.h * r
    left = Rect(u_l - 0.5 * sb.w_l * r, v - half_h, u_l + 0.5 * sb.w_l * r, v + half_h)
    right = Rect(u_r - 0.5 * sb.w_r * r, v - half_h, u_r + 0.5 * sb.w_r * r, v + half_h)
    return left, right


def l1_loss(pred, gt) -> float:
    """Mean absolute error between two equal-length vectors."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.size == 0:
        raise ValueError(f"need equal-length non-empty vectors, got {pred.shape} vs {gt.shape}")
    return float(np.mean(np.abs(pred - gt)))


def total_loss(parts: LossParts, w: LossWeights) -> float:
    """Weighted sum of the seven task losses."""
    return (
        w.w_cls * parts.cls
        + w.w_off * parts.off
        + w.w_size * parts.size
        + w.w_dim * parts.dim
        + w.w_theta * parts.theta
        + w.w_kpts * parts.kpts
        + w.w_depth * parts.depth
    )
