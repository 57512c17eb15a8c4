"""Stereo camera model and oriented-box projection geometry.

Conventions used throughout the package:

  * Camera frame: x right, y down, z forward (metres). Depth means z.
  * Pixel coordinates: u right, v down, origin at the top-left corner.
  * Normalized camera coordinates: pixel coordinates with the principal
    point subtracted and divided by the focal length, so a 3D point
    (X, Y, Z) projects to (X/Z, Y/Z).
  * Yaw theta is egocentric, wrapped to (-pi, pi]. At theta = 0 the box
    length axis points along +z (away from the camera); the rotation of a
    body offset (dx, dz) into the camera xz-plane is
        X = x + dx*cos(theta) + dz*sin(theta)
        Z = z - dx*sin(theta) + dz*cos(theta)
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


class DomainError(ValueError):
    """An input is outside the mathematical domain of an operation."""


class BehindCameraError(DomainError):
    """A projected point or box face is at or behind the camera plane."""


class DegenerateStereoError(DomainError):
    """A stereo measurement carries no depth information (gap <= 0)."""


class DegenerateAngleError(DomainError):
    """An angle encoding is the zero vector and has no direction."""


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    return math.pi - (math.pi - a) % TWO_PI


@dataclass(frozen=True)
class CameraRig:
    """Rectified stereo calibration: focal lengths, principal point, baseline."""

    fu: float
    fv: float
    cu: float
    cv: float
    b: float

    def __post_init__(self):
        if not (self.fu > 0 and self.fv > 0):
            raise ValueError(f"focal lengths must be positive, got fu={self.fu}, fv={self.fv}")
        if not self.b > 0:
            raise ValueError(f"baseline must be positive, got b={self.b}")


@dataclass(frozen=True)
class Box3D:
    """7-DoF oriented box in the camera frame.

    (x, y, z) is the box center, (w, h, l) width/height/length, theta the
    egocentric yaw. theta is wrapped to (-pi, pi] on construction.
    """

    x: float
    y: float
    z: float
    w: float
    h: float
    l: float
    theta: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0 and self.l > 0):
            raise ValueError(f"box dimensions must be positive, got {(self.w, self.h, self.l)}")
        if not self.z > 0:
            raise ValueError(f"box center must be in front of the camera, got z={self.z}")
        object.__setattr__(self, "theta", wrap_angle(self.theta))


@dataclass(frozen=True)
class Rect:
    """Axis-aligned 2D rectangle (u1, v1) top-left to (u2, v2) bottom-right."""

    u1: float
    v1: float
    u2: float
    v2: float

    def __post_init__(self):
        if not (self.u1 < self.u2 and self.v1 < self.v2):
            raise ValueError(f"degenerate rectangle {(self.u1, self.v1, self.u2, self.v2)}")

    @property
    def width(self) -> float:
        return self.u2 - self.u1

    @property
    def height(self) -> float:
        return self.v2 - self.v1

    @property
    def center_u(self) -> float:
        return 0.5 * (self.u1 + self.u2)

    @property
    def center_v(self) -> float:
        return 0.5 * (self.v1 + self.v2)

    def shifted(self, du: float = 0.0, dv: float = 0.0) -> "Rect":
        return Rect(self.u1 + du, self.v1 + dv, self.u2 + du, self.v2 + dv)


@dataclass(frozen=True)
class StereoBoxPair:
    """An object's 2D boxes in the rectified left and right images (pixels)."""

    left: Rect
    right: Rect

    def center_gap(self) -> float:
        """Horizontal pixel gap between left and right box centers."""
        return self.left.center_u - self.right.center_u


@dataclass(frozen=True)
class DepthGrid:
    """Uniformly spaced depth levels, endpoints inclusive."""

    z_min: float
    z_max: float
    n: int
    levels: np.ndarray

    def __post_init__(self):
        if not (0 < self.z_min < self.z_max):
            raise ValueError(f"need 0 < z_min < z_max, got ({self.z_min}, {self.z_max})")
        if self.n < 2:
            raise ValueError(f"need at least 2 levels, got n={self.n}")
        lv = np.asarray(self.levels, dtype=float)
        if lv.shape != (self.n,):
            raise ValueError(f"levels shape {lv.shape} inconsistent with n={self.n}")
        gaps = np.diff(lv)
        if not np.all(gaps > 0):
            raise ValueError("levels must be strictly increasing")
        step = (self.z_max - self.z_min) / (self.n - 1)
        if np.max(np.abs(gaps - step)) > 1e-9 * step:
            raise ValueError("levels must be uniformly spaced")
        object.__setattr__(self, "levels", lv)

    @property
    def step(self) -> float:
        return (self.z_max - self.z_min) / (self.n - 1)


@dataclass(frozen=True)
class Measurements5:
    """The five projection measurements: left/top/right/bottom box edges and
    the perspective-keypoint horizontal coordinate, all in normalized camera
    coordinates."""

    u_l: float
    v_t: float
    u_r: float
    v_b: float
    u_p: float

    def __post_init__(self):
        if not self.u_l < self.u_r:
            raise ValueError(f"need u_l < u_r, got ({self.u_l}, {self.u_r})")
        if not self.v_t < self.v_b:
            raise ValueError(f"need v_t < v_b, got ({self.v_t}, {self.v_b})")

    def as_array(self) -> np.ndarray:
        return np.array([self.u_l, self.v_t, self.u_r, self.v_b, self.u_p])


class CornerType(enum.Enum):
    """Bottom corners of a 3D box in the body frame.

    FRONT is the +length/2 face (the heading direction), RIGHT the +width/2
    side. At theta = 0 the camera looks at the BACK face.
    """

    FRONT_LEFT = (-0.5, 0.5)
    FRONT_RIGHT = (0.5, 0.5)
    BACK_LEFT = (-0.5, -0.5)
    BACK_RIGHT = (0.5, -0.5)

    def offsets(self, w: float, l: float) -> tuple[float, float]:
        sx, sz = self.value
        return sx * w, sz * l


def depth_from_disparity(d: float, rig: CameraRig) -> float:
    """Convert a disparity in pixels to a depth in metres: z = fu*b/d."""
    if d <= 0:
        raise DomainError(f"disparity must be positive, got {d}")
    return rig.fu * rig.b / d


def disparity_from_depth(z: float, rig: CameraRig) -> float:
    """Convert a depth in metres to a disparity in pixels: d = fu*b/z."""
    if z <= 0:
        raise DomainError(f"depth must be positive, got {z}")
    return rig.fu * rig.b / z


def uniform_depth_grid(z_min: float, z_max: float, n: int) -> DepthGrid:
    """Build n depth levels uniformly spaced over [z_min, z_max]."""
    if not (0 < z_min < z_max):
        raise ValueError(f"need 0 < z_min < z_max, got ({z_min}, {z_max})")
    if n < 2:
        raise ValueError(f"need at least 2 levels, got n={n}")
    return DepthGrid(z_min, z_max, n, np.linspace(z_min, z_max, n))


def disparity_uniform_levels(z_min: float, z_max: float, n: int, rig: CameraRig) -> np.ndarray:
    """Depth levels whose disparities are uniformly spaced.

    Returned for comparison against uniform_depth_grid: the depth gaps of a
    disparity-uniform grid grow strictly with depth, which under-resolves
    the far range. Not a DepthGrid (its levels are not depth-uniform).
    """
    if not (0 < z_min < z_max):
        raise ValueError(f"need 0 < z_min < z_max, got ({z_min}, {z_max})")
    if n < 2:
        raise ValueError(f"need at least 2 levels, got n={n}")
    d_hi = disparity_from_depth(z_min, rig)
    d_lo = disparity_from_depth(z_max, rig)
    disparities = np.linspace(d_hi, d_lo, n)
    return rig.fu * rig.b / disparities


def depth_range_from_box_pair(
    pair: StereoBoxPair,
    rig: CameraRig,
    rho: float = 0.3,
    z_floor: float = 1.0,
) -> tuple[float, float]:
    """Coarse depth range for an object from its stereo box-center gap.

    The gap between left and right box centers is a disparity estimate, so
    z_c = fu*b/gap; the range is z_c*(1 -/+ rho) with the lower bound
    clamped at z_floor.
    """
    gap = pair.center_gap()
    if gap <= 0:
        raise DegenerateStereoError(f"non-positive stereo center gap {gap}")
    z_c = depth_from_disparity(gap, rig)
    return max(z_floor, z_c * (1.0 - rho)), z_c * (1.0 + rho)


def egocentric_from_allocentric(alpha: float, x: float, z: float) -> float:
    """theta = alpha + atan(x/z), wrapped to (-pi, pi]."""
    if z <= 0:
        raise DomainError(f"depth must be positive, got {z}")
    return wrap_angle(alpha + math.atan(x / z))


def encode_angle(alpha: float) -> tuple[float, float]:
    """Encode an angle as the continuous pair (sin, cos)."""
    return math.sin(alpha), math.cos(alpha)


def decode_angle(sin_a: float, cos_a: float) -> float:
    """Decode a (sin, cos) pair back to an angle in (-pi, pi].

    The input is normalized first; the zero vector has no direction.
    """
    norm = math.hypot(sin_a, cos_a)
    if norm < 1e-300:
        raise DegenerateAngleError("cannot decode a zero (sin, cos) vector")
    return wrap_angle(math.atan2(sin_a / norm, cos_a / norm))


def _corner_terms(x, z, theta, dx, dz):
    c, s = math.cos(theta), math.sin(theta)
    num = x + dx * c + dz * s
    den = z - dx * s + dz * c
    return num, den


def project_pose(
    x: float,
    y: float,
    theta: float,
    dims: tuple[float, float, float],
    z: float,
    kp_type: CornerType,
    vertical_half: str = "height",
) -> tuple[np.ndarray, np.ndarray]:
    """Five projection measurements and their Jacobian wrt (x, y, theta).

    dims is (w, h, l); z is held fixed. Each measurement is the ratio of a
    rotated bottom-corner offset:

        u = (x + dx*cos t + dz*sin t) / (z - dx*sin t + dz*cos t)

    u_p uses the corner selected by kp_type; u_l and u_r are the smallest
    and largest u among the three remaining bottom corners (the corner
    forming each box edge depends on the viewpoint; near theta = 0 this
    reduces to the BACK_LEFT / FRONT_RIGHT pair). v_t and v_b reuse the
    u_l and u_r denominators with numerators y -/+ q, where q = h/2 by
    default; vertical_half="length" switches q to l/2.

    Raises BehindCameraError if any corner denominator is non-positive.
    """
    w, h, l = dims
    if vertical_half == "height":
        q = 0.5 * h
    elif vertical_half == "length":
        q = 0.5 * l
    else:
        raise ValueError(f"vertical_half must be 'height' or 'length', got {vertical_half!r}")

    c, s = math.cos(theta), math.sin(theta)
    projected = {}
    for corner in CornerType:
        dx, dz = corner.offsets(w, l)
        num = x + dx * c + dz * s
        den = z - dx * s + dz * c
        if den <= 0:
            raise BehindCameraError(
                f"corner {corner.name} denominator {den:.6g} <= 0 at theta={theta:.6g}"
            )
        u = num / den
        dnum = -dx * s + dz * c  # d(num)/d(theta)
        dden = -dx * c - dz * s  # d(den)/d(theta)
        projected[corner] = (u, den, dnum, dden)

    edges = sorted(
        (projected[corner] for corner in CornerType if corner is not kp_type),
        key=lambda t: t[0],
    )
    left, right, kp = edges[0], edges[-1], projected[kp_type]

    m = np.empty(5)
    jac = np.zeros((5, 3))
    for row, (u, den, dnum, dden) in ((0, left), (2, right), (4, kp)):
        m[row] = u
        jac[row, 0] = 1.0 / den
        jac[row, 2] = (dnum - u * dden) / den

    # Vertical measurements share the u_l / u_r denominators.
    for row, (_, den, _, dden), num in ((1, left, y - q), (3, right, y + q)):
        v = num / den
        m[row] = v
        jac[row, 1] = 1.0 / den
        jac[row, 2] = -v * dden / den

    return m, jac


def project_box(box: Box3D, kp_type: CornerType, vertical_half: str = "height") -> Measurements5:
    """Project a 3D box to its five normalized measurements."""
    m, _ = project_pose(
        box.x, box.y, box.theta, (box.w, box.h, box.l), box.z, kp_type, vertical_half
    )
    return Measurements5(*map(float, m))


def visible_bottom_corner(box: Box3D) -> CornerType:
    """The bottom corner that projects strictly inside the box's horizontal
    extent: of the two corners between the extremes, the nearer one."""
    projected = []
    for corner in CornerType:
        dx, dz = corner.offsets(box.w, box.l)
        num, den = _corner_terms(box.x, box.z, box.theta, dx, dz)
        if den <= 0:
            raise BehindCameraError(f"corner {corner.name} behind camera (den={den:.6g})")
        projected.append((num / den, den, corner))
    projected.sort(key=lambda t: t[0])
    middle = projected[1:3]
    # Smaller denominator = nearer in depth = visible.
    middle.sort(key=lambda t: t[1])
    return middle[0][2]


def measurements_from_pixels(left_box: Rect, u_p_px: float, rig: CameraRig) -> Measurements5:
    """Convert a pixel-space left box and keypoint u into normalized measurements."""
    return Measurements5(
        u_l=(left_box.u1 - rig.cu) / rig.fu,
        v_t=(left_box.v1 - rig.cv) / rig.fv,
        u_r=(left_box.u2 - rig.cu) / rig.fu,
        v_b=(left_box.v2 - rig.cv) / rig.fv,
        u_p=(u_p_px - rig.cu) / rig.fu,
    )


def measurements_to_pixels(m: Measurements5, rig: CameraRig) -> tuple[Rect, float]:
    """Inverse of measurements_from_pixels: (left pixel box, keypoint u in px)."""
    box = Rect(
        m.u_l * rig.fu + rig.cu,
        m.v_t * rig.fv + rig.cv,
        m.u_r * rig.fu + rig.cu,
        m.v_b * rig.fv + rig.cv,
    )
    return box, m.u_p * rig.fu + rig.cu
