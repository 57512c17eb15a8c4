"""Deterministic synthetic stereo scenes with known 3D ground truth.

Objects are fronto-parallel textured billboards placed at depths taken
from the scene's depth grid, restricted to levels whose disparity
d = fu*b/z is an exact integer (the default rig and grid offer levels at
z in {12, 13.5, 18, 24, 27, 36}). Integer disparities make the right
image and right feature stamp exact integer shifts of the left, so

  * rendered patch disparities equal fu*b/z exactly,
  * the cost-volume level matching the object's depth holds identical
    content in both halves (cosine 1 up to border effects), while every
    other level is misaligned by at least the local disparity gap and
    decorrelates, making the argmax-at-true-level guarantee of
    oracle_features structural rather than statistical, and
  * dense photometric alignment has its exact minimum at the true depth.

Scene directories use the KITTI file layout (calib/, label_2/, image_2/,
image_3/ as PGM) plus feature tensors and an aux file carrying the
right-image box, perspective keypoint and visible range per object.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import (
    Box3D,
    CameraRig,
    CornerType,
    DepthGrid,
    Rect,
    StereoBoxPair,
    project_box,
    uniform_depth_grid,
    visible_bottom_corner,
    wrap_angle,
)
from .solver import VisibleRange

OCCLUSION_THRESHOLDS = (0.10, 0.50)  # below first -> level 0, below second -> 1, else 2


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    n_objects: int = 4
    depth_range: tuple[float, float] = (10.0, 40.0)
    lateral_frac: float = 0.22
    y_range: tuple[float, float] = (0.2, 1.0)
    w_range: tuple[float, float] = (1.5, 2.0)
    h_range: tuple[float, float] = (1.3, 1.8)
    l_range: tuple[float, float] = (3.2, 4.4)
    yaw_range: tuple[float, float] = (-math.pi, math.pi)
    image_size: tuple[int, int] = (640, 192)  # (W, H)
    texture: str = "checker"
    texture_scale: int = 4
    # Cap on how much of any object's footprint (either view) may be covered
    # by the union of the others. At the default 0.3 every object keeps a
    # consistent-texture majority, so its cost-volume match score always
    # beats the false peak an occluder creates at its own depth level; raise
    # it to build heavily occluded scenes without that guarantee.
    max_overlap: float = 0.3
    rig: CameraRig = CameraRig(fu=480.0, fv=480.0, cu=320.0, cv=96.0, b=0.9)
    grid_range: tuple[float, float] = (9.0, 45.0)
    grid_n: int = 25
    feature_channels: int = 16

    def __post_init__(self):
        if self.n_objects < 0:
            raise ValueError(f"n_objects must be >= 0, got {self.n_objects}")
        for name in ("depth_range", "y_range", "w_range", "h_range", "l_range", "yaw_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} is empty: ({lo}, {hi})")
        if self.texture not in ("checker", "noise"):
            raise ValueError(f"texture must be 'checker' or 'noise', got {self.texture!r}")
        if not (0 < self.grid_range[0] < self.grid_range[1]):
            raise ValueError(f"bad grid range {self.grid_range}")

    def grid(self) -> DepthGrid:
        return uniform_depth_grid(self.grid_range[0], self.grid_range[1], self.grid_n)


@dataclass(frozen=True)
class SceneObject:
    box: Box3D
    cls: str
    alpha: float
    disparity: float  # integer-valued by construction
    left_box: Rect
    right_box: Rect
    kp_u: float  # normalized keypoint horizontal coordinate
    kp_corner: CornerType
    footprint: tuple[int, int, int, int]  # integer (u1, v1, u2, v2) in pixels
    texture_seed: int
    occlusion: int = 0
    truncation: float = 0.0
    visible_range: VisibleRange | None = None

    @property
    def pair(self) -> StereoBoxPair:
        return StereoBoxPair(self.left_box, self.right_box)


@dataclass(frozen=True)
class SyntheticScene:
    spec: SceneSpec
    rig: CameraRig
    grid: DepthGrid
    objects: tuple[SceneObject, ...]

    @property
    def image_size(self) -> tuple[int, int]:
        return self.spec.image_size

    def kp_u_px(self, obj: SceneObject) -> float:
        return obj.kp_u * self.rig.fu + self.rig.cu


def placeable_depths(spec: SceneSpec) -> list[tuple[float, int]]:
    """Grid levels inside the depth range whose disparity is integer.

    Returns (depth, disparity) pairs; object depths are drawn from these
    so stereo shifts stay integer-exact (see the module docstring).
    """
    rig = spec.rig
    fb = rig.fu * rig.b
    out = []
    for z in spec.grid().levels:
        if not (spec.depth_range[0] <= z <= spec.depth_range[1]):
            continue
        d = fb / z
        if abs(d - round(d)) < 1e-9:
            out.append((float(z), int(round(d))))
    return out


def generate_scene(spec: SceneSpec) -> SyntheticScene:
    """Sample a scene: boxes near-to-far with stereo boxes, keypoints,
    visible ranges and occlusion levels annotated.

    Placement rejects samples whose projection leaves either image or
    whose footprint would bury (or be buried by) an existing object;
    objects that fail repeatedly are dropped. Deterministic from
    spec.seed.
    """
    if spec.depth_range[0] >= spec.depth_range[1]:
        raise ValueError(f"empty depth range {spec.depth_range}")
    rng = np.random.default_rng(spec.seed)
    rig = spec.rig
    grid = spec.grid()
    w_img, h_img = spec.image_size

    depths = placeable_depths(spec)
    if not depths:
        raise ValueError(
            f"no grid level in {spec.depth_range} has an integer disparity for this rig"
        )

    placed: list[SceneObject] = []
    for _ in range(spec.n_objects):
        for _ in range(80):
            z, disparity = depths[int(rng.integers(0, len(depths)))]
            x = rng.uniform(-spec.lateral_frac * z, spec.lateral_frac * z)
            y = rng.uniform(*spec.y_range)
            w = rng.uniform(*spec.w_range)
            h = rng.uniform(*spec.h_range)
            l = rng.uniform(*spec.l_range)
            theta = rng.uniform(*spec.yaw_range)
            box = Box3D(x, y, z, w, h, l, theta)
            try:
                kp_corner = visible_bottom_corner(box)
                m = project_box(box, kp_corner)
            except ValueError:
                continue
            left_box = Rect(
                m.u_l * rig.fu + rig.cu,
                m.v_t * rig.fv + rig.cv,
                m.u_r * rig.fu + rig.cu,
                m.v_b * rig.fv + rig.cv,
            )
            fp = (
                math.floor(left_box.u1),
                math.floor(left_box.v1),
                math.ceil(left_box.u2),
                math.ceil(left_box.v2),
            )
            if fp[0] < 1 or fp[1] < 1 or fp[2] > w_img - 1 or fp[3] > h_img - 1:
                continue
            if fp[0] - disparity < 1 or fp[2] - fp[0] < 6 or fp[3] - fp[1] < 4:
                continue
            fp_r = (fp[0] - disparity, fp[1], fp[2] - disparity, fp[3])
            left_fps = [o.footprint for o in placed]
            right_fps = [_right_footprint(o) for o in placed]
            if _overlap_exceeds(fp, left_fps, spec.max_overlap) or _overlap_exceeds(
                fp_r, right_fps, spec.max_overlap
            ):
                continue
            alpha = wrap_angle(box.theta - math.atan(box.x / box.z))
            placed.append(
                SceneObject(
                    box=box,
                    cls="Car",
                    alpha=alpha,
                    disparity=disparity,
                    left_box=left_box,
                    right_box=left_box.shifted(du=-disparity),
                    kp_u=m.u_p,
                    kp_corner=kp_corner,
                    footprint=fp,
                    texture_seed=int(rng.integers(0, 2**31)),
                )
            )
            break

    placed.sort(key=lambda o: o.box.z)
    objects = tuple(_annotate_occlusion(placed, rig))
    return SyntheticScene(spec=spec, rig=rig, grid=grid, objects=objects)


def _right_footprint(obj: SceneObject) -> tuple[int, int, int, int]:
    u1, v1, u2, v2 = obj.footprint
    d = int(round(obj.disparity))
    return u1 - d, v1, u2 - d, v2


def _too_buried(fp, others, cap: float = 0.55) -> bool:
    """True when fp overlaps (or is overlapped by) existing footprints by
    more than cap of either area: keeps every object's stereo texture
    partly visible so its match score stays informative."""
    u1, v1, u2, v2 = fp
    area = (u2 - u1) * (v2 - v1)
    for ou1, ov1, ou2, ov2 in others:
        iw = min(u2, ou2) - max(u1, ou1)
        ih = min(v2, ov2) - max(v1, ov1)
        if iw <= 0 or ih <= 0:
            continue
        inter = iw * ih
        other_area = (ou2 - ou1) * (ov2 - ov1)
        if inter > cap * area or inter > cap * other_area:
            return True
    return False


def _annotate_occlusion(objects: list[SceneObject], rig: CameraRig) -> list[SceneObject]:
    """Occlusion level and visible range from overlap with nearer footprints."""
    out = []
    for i, obj in enumerate(objects):
        u1, v1, u2, v2 = obj.footprint
        cols = np.arange(u1, u2)
        covered = np.zeros((v2 - v1, u2 - u1), dtype=bool)
        for other in objects[:i]:  # nearer objects only (list is near-to-far)
            ou1, ov1, ou2, ov2 = other.footprint
            cu1, cu2 = max(u1, ou1), min(u2, ou2)
            cv1, cv2 = max(v1, ov1), min(v2, ov2)
            if cu1 < cu2 and cv1 < cv2:
                covered[cv1 - v1 : cv2 - v1, cu1 - u1 : cu2 - u1] = True
        frac = float(covered.mean()) if covered.size else 0.0
        if frac < OCCLUSION_THRESHOLDS[0]:
            occ = 0
        elif frac < OCCLUSION_THRESHOLDS[1]:
            occ = 1
        else:
            occ = 2

        col_clear = covered.mean(axis=0) < 0.5
        lo, hi = _longest_run(col_clear)
        if lo is None:
            lo, hi = 0, len(cols)
        vr = VisibleRange(
            (cols[lo] - rig.cu) / rig.fu,
            (cols[hi - 1] + 1 - rig.cu) / rig.fu,
            occlusion_level=occ,
        )
        out.append(replace(obj, occlusion=occ, visible_range=vr))
    return out


def _longest_run(mask: np.ndarray) -> tuple[int | None, int | None]:
    best_lo, best_hi = None, None
    lo = None
    for i, v in enumerate(list(mask) + [False]):
        if v and lo is None:
            lo = i
        elif not v and lo is not None:
            if best_lo is None or i - lo > best_hi - best_lo:
                best_lo, best_hi = lo, i
            lo = None
    return best_lo, best_hi


def _texture_patch(obj: SceneObject, spec: SceneSpec) -> np.ndarray:
    """The object's left-image texture on its integer footprint."""
    u1, v1, u2, v2 = obj.footprint
    h, w = v2 - v1, u2 - u1
    rng = np.random.default_rng(obj.texture_seed)
    if spec.texture == "checker":
        hi = rng.uniform(0.65, 0.95)
        lo = rng.uniform(0.05, 0.35)
        s = max(1, spec.texture_scale)
        uu, vv = np.meshgrid(np.arange(w) // s, np.arange(h) // s)
        return np.where((uu + vv) % 2 == 0, hi, lo).astype(float)
    return rng.uniform(0.0, 1.0, size=(h, w))


def render_stereo(scene: SyntheticScene) -> tuple[np.ndarray, np.ndarray]:
    """Paint the scene's billboards into both views, far to near.

    The right view shows each patch shifted left by the object's disparity
    with linear resampling (exact for the integer disparities produced by
    generate_scene). Background is a mild vertical gradient, constant
    along u so it cannot bias horizontal alignment.
    """
    w_img, h_img = scene.image_size
    rows = np.linspace(0.2, 0.3, h_img)[:, None]
    left = np.tile(rows, (1, w_img))
    right = left.copy()

    for obj in reversed(scene.objects):  # far to near
        u1, v1, u2, v2 = obj.footprint
        patch = _texture_patch(obj, scene.spec)
        left[v1:v2, u1:u2] = patch

        d = obj.disparity
        lo = math.ceil(u1 - d)
        hi = math.floor(u2 - 1 - d)
        if hi < lo:
            continue
        us = np.arange(max(lo, 0), min(hi, w_img - 1) + 1)
        src = us + d - u1
        i0 = np.floor(src).astype(int)
        f = src - i0
        i1 = np.minimum(i0 + 1, u2 - u1 - 1)
        right[v1:v2, us] = patch[:, i0] * (1 - f) + patch[:, i1] * f
    return left, right


def oracle_features(
    scene: SyntheticScene, channels: int, grid: DepthGrid
) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Feature maps whose cost-volume match peaks at each object's depth.

    Every cell of both maps holds a unit-norm channel vector: independent
    noise in the background, and per-object random texture fields stamped
    on the left footprint and again, shifted by the object's (integer)
    disparity, in the right map. Cosine match scores across grid levels
    are then strictly ordered by disparity misalignment, peaking at the
    returned per-object true level (the level nearest the object's depth).

    With channels == 1 and a constant field the cosine degenerates to 1 at
    every level; discrimination needs the textured stamps.
    """
    w_img, h_img = scene.image_size
    rng = np.random.default_rng([scene.spec.seed, 0xFEA7])
    left = _unit_cells(rng.normal(size=(channels, h_img, w_img)))
    right = _unit_cells(rng.normal(size=(channels, h_img, w_img)))

    levels = []
    for obj in reversed(scene.objects):  # far to near so near stamps win overlaps
        z = obj.box.z
        if not (grid.z_min <= z <= grid.z_max):
            raise ValueError(f"object depth {z:.3f} outside grid [{grid.z_min}, {grid.z_max}]")
        u1, v1, u2, v2 = obj.footprint
        obj_rng = np.random.default_rng([obj.texture_seed, 0x0FEA])
        field = _unit_cells(obj_rng.normal(size=(channels, v2 - v1, u2 - u1)))
        left[:, v1:v2, u1:u2] = field
        d = int(round(obj.disparity))
        right[:, v1:v2, u1 - d : u2 - d] = field
    for obj in scene.objects:
        levels.append(int(np.argmin(np.abs(grid.levels - obj.box.z))))
    return left, right, levels


def _unit_cells(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=0, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


# ---------------------------------------------------------------------------
# Scene directory I/O (KITTI layout plus feature tensors and an aux file)
# ---------------------------------------------------------------------------

def scene_records(scene: SyntheticScene) -> list:
    """Ground-truth labels for the scene ('location' is the box center)."""
    from .kitti import ObjectRecord

    records = []
    for obj in scene.objects:
        b = obj.box
        records.append(
            ObjectRecord(
                cls=obj.cls,
                truncation=obj.truncation,
                occlusion=obj.occlusion,
                alpha=obj.alpha,
                bbox=obj.left_box,
                dims=(b.h, b.w, b.l),
                location=(b.x, b.y, b.z),
                rotation_y=b.theta,
            )
        )
    return records


def write_aux(scene: SyntheticScene) -> str:
    """Per-object sidecar: right box, keypoint, visible range, occlusion."""
    lines = []
    for obj in scene.objects:
        r = obj.right_box
        vr = obj.visible_range
        fields = [
            f"{r.u1!r}", f"{r.v1!r}", f"{r.u2!r}", f"{r.v2!r}",
            f"{scene.kp_u_px(obj)!r}", obj.kp_corner.name,
            f"{vr.u_left!r}", f"{vr.u_right!r}", str(obj.occlusion),
        ]
        lines.append(" ".join(fields))
    return "\n".join(lines) + ("\n" if lines else "")


@dataclass(frozen=True)
class AuxObject:
    right_box: Rect
    kp_u_px: float
    kp_corner: CornerType
    visible_range: VisibleRange


def parse_aux(text: str) -> list[AuxObject]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 9:
            raise ValueError(f"aux line {lineno}: {len(fields)} fields, expected 9")
        vals = [float(f) for f in fields[:5]]
        occ = int(fields[8])
        out.append(
            AuxObject(
                right_box=Rect(*vals[:4]),
                kp_u_px=vals[4],
                kp_corner=CornerType[fields[5]],
                visible_range=VisibleRange(float(fields[6]), float(fields[7]), occ),
            )
        )
    return out


def write_scene_dir(out_dir, specs: list[SceneSpec]) -> None:
    """Serialize one frame per spec under the KITTI directory layout."""
    import os

    from . import pgm, tensorio
    from .kitti import write_calib, write_labels

    if not specs:
        raise ValueError("need at least one frame spec")
    base = specs[0]
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("calib", "label_2", "image_2", "image_3", "features", "aux"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    info = {
        "n_frames": len(specs),
        "seed": base.seed,
        "image_width": base.image_size[0],
        "image_height": base.image_size[1],
        "grid_z_min": base.grid_range[0],
        "grid_z_max": base.grid_range[1],
        "grid_n": base.grid_n,
        "feature_channels": base.feature_channels,
        "texture": base.texture,
        "texture_scale": base.texture_scale,
    }
    with open(os.path.join(out_dir, "scene_info.txt"), "w") as fh:
        for key, value in info.items():
            fh.write(f"{key} = {value}\n")

    for frame, spec in enumerate(specs):
        scene = generate_scene(spec)
        name = f"{frame:06d}"
        with open(os.path.join(out_dir, "calib", name + ".txt"), "w") as fh:
            fh.write(write_calib(scene.rig))
        with open(os.path.join(out_dir, "label_2", name + ".txt"), "w") as fh:
            fh.write(write_labels(scene_records(scene)))
        with open(os.path.join(out_dir, "aux", name + ".txt"), "w") as fh:
            fh.write(write_aux(scene))
        left, right = render_stereo(scene)
        pgm.write_pgm(os.path.join(out_dir, "image_2", name + ".pgm"), left)
        pgm.write_pgm(os.path.join(out_dir, "image_3", name + ".pgm"), right)
        fl, fr, _ = oracle_features(scene, spec.feature_channels, scene.grid)
        tensorio.save_tensor(os.path.join(out_dir, "features", name + "_left.tns"), fl)
        tensorio.save_tensor(os.path.join(out_dir, "features", name + "_right.tns"), fr)
