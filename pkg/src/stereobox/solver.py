"""Pose recovery from projection constraints and photometric depth refinement.

With depth fixed, the five box-edge/keypoint measurements constrain the
remaining pose (x, y, theta), solved here by damped Gauss-Newton on the
analytic projection model. Depth itself is then refined by sampling the
object's visible pixels and minimizing the summed left/right intensity
difference over a small window of candidate depths.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .costvol import _bilinear_grid
from .geometry import (
    CameraRig,
    CornerType,
    DomainError,
    Measurements5,
    Rect,
    StereoBoxPair,
    disparity_from_depth,
    egocentric_from_allocentric,
    project_pose,
    wrap_angle,
)


class AlignmentFailedError(RuntimeError):
    """No dense-alignment candidate could sample inside the image."""


@dataclass(frozen=True)
class PerspectiveKeypoint:
    """Horizontal coordinate (normalized) and identity of the visible bottom corner."""

    u: float
    corner_type: CornerType


@dataclass(frozen=True)
class VisibleRange:
    """Normalized horizontal bounds of the unoccluded object surface."""

    u_left: float
    u_right: float
    occlusion_level: int = 0

    def __post_init__(self):
        if not self.u_left < self.u_right:
            raise ValueError(f"need u_left < u_right, got ({self.u_left}, {self.u_right})")
        if self.occlusion_level not in (0, 1, 2):
            raise ValueError(f"occlusion_level must be 0, 1 or 2, got {self.occlusion_level}")

    @property
    def width(self) -> float:
        return self.u_right - self.u_left


@dataclass(frozen=True)
class GNConfig:
    max_iters: int = 50
    damping: float = 1e-3
    tol: float = 1e-10
    grad_tol: float = 1e-8
    weights: tuple[float, float, float, float, float] = (1.0, 1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")


@dataclass(frozen=True)
class PoseEstimate:
    x: float
    y: float
    theta: float
    converged: bool
    iterations: int
    residual_norm: float
    cost_history: tuple = field(repr=False, default=())


def estimate_box_pose(
    m: Measurements5,
    dims: tuple[float, float, float],
    z: float,
    init: tuple[float, float, float],
    cfg: GNConfig = GNConfig(),
    kp_type: CornerType = CornerType.BACK_RIGHT,
    vertical_half: str = "height",
    fix_theta: bool = False,
    drop: frozenset[int] | set[int] = frozenset(),
) -> PoseEstimate:
    """Recover (x, y, theta) from the five measurements with z held fixed.

    Residuals are predicted-minus-measured values of the projection model,
    minimized by Gauss-Newton with Levenberg-style damping (the damping is
    multiplied by 10 when a step increases the cost and divided by 10 when
    it decreases). Convergence is declared when the accepted update norm
    falls below cfg.tol at a stationary point (gradient norm below
    cfg.grad_tol); otherwise the best iterate is returned flagged
    non-converged. The gradient check catches damping stalls at the kinks
    of the viewpoint-dependent corner assignment, which would otherwise
    pass as silently wrong solutions.

    fix_theta freezes theta at its initial value (the truncated-box
    fallback, where theta comes from the viewing angle alpha) and drop
    removes measurement rows by index (0..4: u_l, v_t, u_r, v_b, u_p),
    used for edges clipped by the image border.
    """
    if z <= 0:
        raise DomainError(f"depth must be positive, got {z}")
    target = m.as_array()
    keep = np.array([i not in drop for i in range(5)])
    w = np.sqrt(np.asarray(cfg.weights, dtype=float))[keep]
    n_params = 2 if fix_theta else 3
    if keep.sum() < n_params:
        raise ValueError(f"{int(keep.sum())} residuals cannot constrain {n_params} unknowns")

    def residuals(p):
        pred, jac = project_pose(p[0], p[1], p[2], dims, z, kp_type, vertical_half)
        r = (pred - target)[keep] * w
        j = jac[keep] * w[:, None]
        return r, (j[:, :2] if fix_theta else j)

    p = np.array(init, dtype=float)
    r, jac = residuals(p)
    cost = float(r @ r)
    history = [cost]
    lam = cfg.damping
    converged = False
    iters = 0

    for iters in range(1, cfg.max_iters + 1):
        stepped = False
        for _ in range(25):
            jtj = jac.T @ jac
            try:
                delta = np.linalg.solve(jtj + lam * np.eye(n_params), -jac.T @ r)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            p_new = p.copy()
            p_new[:n_params] += delta
            try:
                r_new, jac_new = residuals(p_new)
            except DomainError:
                lam *= 10.0
                continue
            cost_new = float(r_new @ r_new)
            if cost_new <= cost:
                p, r, jac, cost = p_new, r_new, jac_new, cost_new
                history.append(cost)
                lam = max(lam / 10.0, 1e-12)
                stepped = True
                break
            lam *= 10.0
        if not stepped:
            break
        if np.linalg.norm(delta) < cfg.tol:
            converged = bool(np.linalg.norm(jac.T @ r) <= cfg.grad_tol)
            break

    return PoseEstimate(
        x=float(p[0]),
        y=float(p[1]),
        theta=wrap_angle(float(p[2])),
        converged=converged,
        iterations=iters,
        residual_norm=math.sqrt(cost),
        cost_history=tuple(history),
    )


def initial_pose_from_network(
    box2d: StereoBoxPair, z: float, alpha: float, rig: CameraRig
) -> tuple[float, float, float]:
    """Back-project the left 2D box center at depth z; theta from alpha.

    x0 = z*(u_c - cu)/fu, y0 = z*(v_c - cv)/fv, theta0 = alpha + atan(x0/z).
    """
    if z <= 0:
        raise DomainError(f"depth must be positive, got {z}")
    x0 = z * (box2d.left.center_u - rig.cu) / rig.fu
    y0 = z * (box2d.left.center_v - rig.cv) / rig.fv
    return x0, y0, egocentric_from_allocentric(alpha, x0, z)


def shrink_visible_range(
    vr: VisibleRange, kappa: float, width_floor: float = 1e-9
) -> tuple[VisibleRange, bool]:
    """Pull the visible bounds inward for heavily occluded objects.

    Objects at occlusion level 2 lose kappa*width from each side; lower
    levels pass through unchanged. Returns (range, degenerate): if the
    shrunken width falls below width_floor both bounds collapse to the
    center and the degenerate flag is set.
    """
    if not 0 <= kappa < 0.5:
        raise ValueError(f"kappa must be in [0, 0.5), got {kappa}")
    if vr.occlusion_level < 2:
        return vr, False
    margin = kappa * vr.width
    lo, hi = vr.u_left + margin, vr.u_right - margin
    if hi - lo <= width_floor:
        center = 0.5 * (vr.u_left + vr.u_right)
        half = max(width_floor, 0.5 * (hi - lo))
        return VisibleRange(center - half, center + half, vr.occlusion_level), True
    return VisibleRange(lo, hi, vr.occlusion_level), False


class AlignStatus(enum.Enum):
    REFINED = "refined"
    FLAT = "flat"
    BOUNDARY = "boundary"


@dataclass(frozen=True)
class AlignResult:
    z: float
    status: AlignStatus
    candidates: np.ndarray = field(repr=False, default=None)
    errors: np.ndarray = field(repr=False, default=None)


def dense_align(
    left_img: np.ndarray,
    right_img: np.ndarray,
    vr: VisibleRange,
    v_extent: tuple[float, float],
    z_init: float,
    search: tuple[float, int],
    rig: CameraRig,
) -> AlignResult:
    """Refine a center depth by minimizing summed photometric error.

    For each candidate depth z (n_steps values uniform over
    [z_init - dz, z_init + dz]) the error is
    E(z) = sum |I_l(u, v) - I_r(u - d(z), v)| over the integer pixels inside
    the visible range (normalized bounds, converted through the rig) and the
    given vertical pixel extent, with bilinear sampling of the right image.
    Pixels whose right-image sample falls outside the image invalidate the
    candidate. The best candidate is refined by one parabolic fit over its
    two neighbours; the result always stays inside the search window.

    A constant error surface returns z_init flagged FLAT; a minimum at the
    window edge is returned unrefined flagged BOUNDARY. If every candidate
    is invalid an AlignmentFailedError is raised.
    """
    dz, n_steps = search
    if z_init - dz <= 0:
        raise DomainError(f"search window reaches non-positive depth: {z_init} - {dz}")
    if n_steps < 3:
        raise ValueError(f"need at least 3 search steps, got {n_steps}")
    left_img = np.asarray(left_img, dtype=float)
    right_img = np.asarray(right_img, dtype=float)
    h, w = left_img.shape

    u_lo = vr.u_left * rig.fu + rig.cu
    u_hi = vr.u_right * rig.fu + rig.cu
    us = np.arange(math.ceil(u_lo), math.floor(u_hi) + 1)
    vs = np.arange(math.ceil(v_extent[0]), math.floor(v_extent[1]) + 1)
    us = us[(us >= 0) & (us < w)]
    vs = vs[(vs >= 0) & (vs < h)]
    if us.size == 0 or vs.size == 0:
        raise AlignmentFailedError("visible range holds no image pixels")
    patch = left_img[np.ix_(vs, us)]

    candidates = np.linspace(z_init - dz, z_init + dz, n_steps)
    errors = np.full(n_steps, np.nan)
    for i, z in enumerate(candidates):
        d = disparity_from_depth(float(z), rig)
        xs = us - d
        # Sample centers live on the integer pixel lattice; _bilinear_grid
        # expects half-integer cell-center coordinates.
        if xs[0] < 0 or xs[-1] > w - 1:
            continue
        sampled = _bilinear_grid(right_img[None], vs + 0.5, xs + 0.5)[0]
        errors[i] = np.abs(patch - sampled).sum()

    valid = np.isfinite(errors)
    if not valid.any():
        raise AlignmentFailedError("every candidate depth samples outside the right image")

    spread = np.nanmax(errors) - np.nanmin(errors)
    if spread <= 1e-12 * (1.0 + abs(float(np.nanmax(errors)))):
        return AlignResult(z_init, AlignStatus.FLAT, candidates, errors)

    k = int(np.nanargmin(errors))
    if k == 0 or k == n_steps - 1 or not (valid[k - 1] and valid[k + 1]):
        return AlignResult(float(candidates[k]), AlignStatus.BOUNDARY, candidates, errors)

    e0, e1, e2 = errors[k - 1], errors[k], errors[k + 1]
    denom = e0 - 2.0 * e1 + e2
    if denom <= 0:
        return AlignResult(float(candidates[k]), AlignStatus.BOUNDARY, candidates, errors)
    step = candidates[1] - candidates[0]
    z_ref = candidates[k] + 0.5 * step * (e0 - e2) / denom
    z_ref = float(np.clip(z_ref, candidates[0], candidates[-1]))
    return AlignResult(z_ref, AlignStatus.REFINED, candidates, errors)
