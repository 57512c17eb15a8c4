"""Batch command-line driver.

Subcommands:
  synth     generate a synthetic scene directory from a spec file
  estimate  run depth estimation + box refinement over a scene directory
  eval      score detection files against ground-truth labels (AP table)
  refine    re-run the geometric refinement on existing detection files

Configuration files are flat "key = value" text ('#' starts a comment).
Frames are processed by a bounded worker pool; outputs are written by a
single writer in frame order, so runs are reproducible byte for byte.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import pgm, tensorio
from .costvol import (
    ConvStack,
    GateConv,
    build_cost_volume,
    depth_head,
    expected_depth,
    match_reweight,
    match_scores,
    structure_attention,
)
from .evaluation import bev_iou_records, evaluate_all, format_ap_table
from .geometry import (
    DepthGrid,
    StereoBoxPair,
    measurements_from_pixels,
    uniform_depth_grid,
)
from .kitti import ObjectRecord, parse_calib, parse_labels, write_labels
from .solver import (
    GNConfig,
    dense_align,
    estimate_box_pose,
    initial_pose_from_network,
    shrink_visible_range,
)
from .synth import SceneSpec, parse_aux, write_scene_dir

log = logging.getLogger("stereobox")


def parse_kv(text: str) -> dict[str, str]:
    """Parse flat 'key = value' lines; '#' starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _coerce(value: str, kind):
    if kind is bool:
        lowered = value.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return kind(value)


@dataclass(frozen=True)
class RunConfig:
    """Pipeline toggles and numeric parameters for estimate/eval/refine."""

    reweight: bool = True
    attention: bool = True
    box_estimation: bool = True
    dense_alignment: bool = True
    roi_h: int = 8
    roi_w: int = 8
    logit_scale: float = 40.0
    head_seed: int = 0
    kappa: float = 0.2
    rho: float = 0.3
    align_half_window: float = 2.0
    align_steps: int = 81
    gn_max_iters: int = 50
    gn_damping: float = 1e-3
    gn_tol: float = 1e-10
    ap_mode: str = "11"
    iou_thresholds: str = "0.5,0.7"
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if self.ap_mode not in ("11", "40"):
            raise ValueError(f"ap_mode must be '11' or '40', got {self.ap_mode!r}")
        if self.jobs < 1 or self.align_steps < 3 or self.roi_h < 1 or self.roi_w < 1:
            raise ValueError("invalid numeric configuration")
        if not 0 <= self.kappa < 0.5:
            raise ValueError(f"kappa must be in [0, 0.5), got {self.kappa}")

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        with open(path) as fh:
            pairs = parse_kv(fh.read())
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in pairs.items():
            if key not in fields:
                raise ValueError(f"{path}: unknown config key {key!r}")
            kind = {"bool": bool, "int": int, "float": float, "str": str}[fields[key]]
            kwargs[key] = _coerce(value, kind)
        return cls(**kwargs)

    def gn(self) -> GNConfig:
        return GNConfig(max_iters=self.gn_max_iters, damping=self.gn_damping, tol=self.gn_tol)


def scene_spec_from_file(path: str, seed_override: int | None = None) -> tuple[SceneSpec, int]:
    """Read a SceneSpec plus n_frames from a flat key-value spec file."""
    with open(path) as fh:
        pairs = parse_kv(fh.read())
    n_frames = int(pairs.pop("n_frames", "1"))
    kwargs = {}
    simple = {
        "seed": int,
        "n_objects": int,
        "lateral_frac": float,
        "texture": str,
        "texture_scale": int,
        "grid_n": int,
        "feature_channels": int,
    }
    ranges = {
        "depth_range", "y_range", "w_range", "h_range", "l_range", "yaw_range", "grid_range",
    }
    for key, value in pairs.items():
        if key in simple:
            kwargs[key] = _coerce(value, simple[key])
        elif key in ranges:
            lo, hi = value.split(",")
            kwargs[key] = (float(lo), float(hi))
        elif key == "image_size":
            w, h = value.split(",")
            kwargs[key] = (int(w), int(h))
        else:
            raise ValueError(f"{path}: unknown scene key {key!r}")
    if seed_override is not None:
        kwargs["seed"] = seed_override
    spec = SceneSpec(**kwargs)
    if n_frames < 0:
        raise ValueError(f"{path}: n_frames must be >= 0")
    return spec, n_frames


@dataclass(frozen=True)
class SceneInfo:
    grid: DepthGrid
    feature_channels: int

    @classmethod
    def load(cls, scene_dir: str) -> "SceneInfo":
        path = os.path.join(scene_dir, "scene_info.txt")
        with open(path) as fh:
            pairs = parse_kv(fh.read())
        grid = uniform_depth_grid(
            float(pairs["grid_z_min"]), float(pairs["grid_z_max"]), int(pairs["grid_n"])
        )
        return cls(grid=grid, feature_channels=int(pairs["feature_channels"]))


def _frames_in(directory: str, suffix: str = ".txt") -> list[str]:
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"missing directory: {directory}")
    return sorted(f[: -len(suffix)] for f in os.listdir(directory) if f.endswith(suffix))


def estimate_object(rec, aux, features, images, rig, grid, stack, gate, cfg: RunConfig):
    """Full per-object pipeline: cost volume -> depth -> pose -> alignment.

    Returns (detection record, depth before alignment). Depth comes from
    the softmax head: with reweighting enabled the per-level match scores
    (scaled by logit_scale) feed the softmax directly, which is what makes
    the untrained head usable as an oracle pipeline; with reweighting off
    the convolutional head output is used as-is.
    """
    left_fm, right_fm = features
    left_img, right_img = images
    h, w, l = rec.dims

    cv = build_cost_volume(
        left_fm, right_fm, rec.bbox, aux.right_box, grid, rig, cfg.roi_h, cfg.roi_w
    )
    scores = match_scores(cv)
    vol = match_reweight(cv) if cfg.reweight else cv
    if cfg.attention:
        vol = structure_attention(vol, gate)
    if cfg.reweight:
        pmf = depth_head(vol, stack, logits_override=cfg.logit_scale * scores)
    else:
        pmf = depth_head(vol, stack)
    z_hat = expected_depth(pmf)
    confidence = float(pmf.p.max())

    pair = StereoBoxPair(rec.bbox, aux.right_box)
    x, y, theta = initial_pose_from_network(pair, z_hat, rec.alpha, rig)
    m5 = measurements_from_pixels(rec.bbox, aux.kp_u_px, rig)

    if cfg.box_estimation:
        pose = estimate_box_pose(
            m5, (w, h, l), z_hat, (x, y, theta), cfg.gn(), kp_type=aux.kp_corner
        )
        x, y, theta = pose.x, pose.y, pose.theta

    z_final = z_hat
    if cfg.dense_alignment:
        vr, _ = shrink_visible_range(aux.visible_range, cfg.kappa)
        result = dense_align(
            left_img, right_img, vr, (rec.bbox.v1, rec.bbox.v2),
            z_hat, (cfg.align_half_window, cfg.align_steps), rig,
        )
        z_final = result.z
        if cfg.box_estimation:
            pose = estimate_box_pose(
                m5, (w, h, l), z_final, (x, y, theta), cfg.gn(), kp_type=aux.kp_corner
            )
            x, y, theta = pose.x, pose.y, pose.theta

    det = ObjectRecord(
        cls=rec.cls,
        truncation=rec.truncation,
        occlusion=rec.occlusion,
        alpha=rec.alpha,
        bbox=rec.bbox,
        dims=rec.dims,
        location=(x, y, z_final),
        rotation_y=theta,
        score=confidence,
    )
    return det, z_hat


def estimate_frame(scene_dir: str, frame: str, info: SceneInfo, cfg: RunConfig):
    """Run the pipeline over one frame; returns (detections, per-object stats)."""
    with open(os.path.join(scene_dir, "calib", frame + ".txt")) as fh:
        rig = parse_calib(fh.read()).rig
    with open(os.path.join(scene_dir, "label_2", frame + ".txt")) as fh:
        records = parse_labels(fh.read())
    with open(os.path.join(scene_dir, "aux", frame + ".txt")) as fh:
        auxes = parse_aux(fh.read())
    if len(auxes) != len(records):
        raise ValueError(f"frame {frame}: {len(records)} labels but {len(auxes)} aux rows")
    features = (
        tensorio.load_tensor(os.path.join(scene_dir, "features", frame + "_left.tns")),
        tensorio.load_tensor(os.path.join(scene_dir, "features", frame + "_right.tns")),
    )
    images = (
        pgm.read_pgm(os.path.join(scene_dir, "image_2", frame + ".pgm")),
        pgm.read_pgm(os.path.join(scene_dir, "image_3", frame + ".pgm")),
    )
    stack = ConvStack.from_seed(2 * info.feature_channels, seed=cfg.head_seed)
    gate = GateConv.from_seed(2 * info.feature_channels, seed=cfg.head_seed + 1)

    dets, stats = [], []
    for idx, (rec, aux) in enumerate(zip(records, auxes)):
        try:
            det, z_hat = estimate_object(
                rec, aux, features, images, rig, info.grid, stack, gate, cfg
            )
        except Exception as exc:  # soft failure: log and continue the batch
            log.warning("frame %s object %d failed: %s", frame, idx, exc)
            continue
        dets.append(det)
        z_gt = rec.location[2]
        stats.append(
            {
                "z_gt": z_gt,
                "z_hat_err": abs(z_hat - z_gt),
                "z_final_err": abs(det.location[2] - z_gt),
                "bev_iou": bev_iou_records(det, rec),
            }
        )
    return dets, stats


def cmd_synth(args) -> int:
    spec, n_frames = scene_spec_from_file(args.spec, seed_override=args.seed)
    specs = [dataclasses.replace(spec, seed=spec.seed + i) for i in range(n_frames)]
    write_scene_dir(args.out, specs)
    log.info("wrote %d frame(s) to %s", n_frames, args.out)
    return 0


def cmd_estimate(args) -> int:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.jobs is not None:
        cfg = dataclasses.replace(cfg, jobs=args.jobs)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed, head_seed=args.seed)
    info = SceneInfo.load(args.scene_dir)
    frames = _frames_in(os.path.join(args.scene_dir, "label_2"))

    data_dir = os.path.join(args.out_dir, "data")
    os.makedirs(data_dir, exist_ok=True)

    def work(frame):
        return frame, estimate_frame(args.scene_dir, frame, info, cfg)

    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            results = dict(pool.map(work, frames))
    else:
        results = dict(work(f) for f in frames)

    all_stats = []
    for frame in frames:  # single writer, frame order
        dets, stats = results[frame]
        with open(os.path.join(data_dir, frame + ".txt"), "w") as fh:
            fh.write(write_labels(dets))
        all_stats.extend(stats)

    report = _report(cfg, info, all_stats)
    with open(os.path.join(args.out_dir, "report.txt"), "w") as fh:
        fh.write(report)
    sys.stdout.write(report)
    return 0


def _report(cfg: RunConfig, info: SceneInfo, stats: list[dict]) -> str:
    lines = [
        f"reweight = {cfg.reweight}",
        f"attention = {cfg.attention}",
        f"box_estimation = {cfg.box_estimation}",
        f"dense_alignment = {cfg.dense_alignment}",
        f"objects = {len(stats)}",
    ]
    if stats:
        step = info.grid.step
        z_hat = np.array([s["z_hat_err"] for s in stats])
        z_fin = np.array([s["z_final_err"] for s in stats])
        ious = np.array([s["bev_iou"] for s in stats])
        lines += [
            f"mean_abs_depth_err = {z_hat.mean():.6f}",
            f"within_one_grid_step = {float((z_hat < step).mean()):.4f}",
            f"mean_abs_depth_err_refined = {z_fin.mean():.6f}",
            f"mean_bev_iou = {ious.mean():.6f}",
            f"bev_iou_ge_0.95 = {float((ious >= 0.95).mean()):.4f}",
        ]
    return "\n".join(lines) + "\n"


def _read_label_dir(directory: str) -> dict[str, list[ObjectRecord]]:
    out = {}
    for frame in _frames_in(directory):
        with open(os.path.join(directory, frame + ".txt")) as fh:
            out[frame] = parse_labels(fh.read())
    return out


def cmd_eval(args) -> int:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    mode = args.ap_mode or cfg.ap_mode
    gts = _read_label_dir(args.gt_dir)
    det_dir = os.path.join(args.det_dir, "data")
    if not os.path.isdir(det_dir):
        det_dir = args.det_dir
    dets = _read_label_dir(det_dir)
    missing = sorted(set(gts) - set(dets))
    if missing:
        log.warning("%d frame(s) without detections: %s", len(missing), ", ".join(missing[:5]))
    if not any(dets.values()):
        log.warning("no detections found under %s", det_dir)
    thresholds = tuple(float(t) for t in cfg.iou_thresholds.split(","))
    rows = evaluate_all(dets, gts, iou_thresholds=thresholds, mode=mode)
    table = format_ap_table(rows)
    sys.stdout.write(table)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(table)
    return 0


def cmd_refine(args) -> int:
    """Solver-only pass: keep detected depths, redo alignment and pose.

    Detection files must hold one row per labelled object in label order
    (as written by cmd_estimate), since the keypoint/visible-range aux
    data is indexed that way.
    """
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    info = SceneInfo.load(args.scene_dir)
    out_data = os.path.join(args.out_dir, "data")
    os.makedirs(out_data, exist_ok=True)
    det_dir = os.path.join(args.det_dir, "data")
    if not os.path.isdir(det_dir):
        det_dir = args.det_dir

    for frame in _frames_in(det_dir):
        with open(os.path.join(det_dir, frame + ".txt")) as fh:
            dets = parse_labels(fh.read())
        with open(os.path.join(args.scene_dir, "calib", frame + ".txt")) as fh:
            rig = parse_calib(fh.read()).rig
        with open(os.path.join(args.scene_dir, "aux", frame + ".txt")) as fh:
            auxes = parse_aux(fh.read())
        images = (
            pgm.read_pgm(os.path.join(args.scene_dir, "image_2", frame + ".pgm")),
            pgm.read_pgm(os.path.join(args.scene_dir, "image_3", frame + ".pgm")),
        )
        refined = []
        for idx, det in enumerate(dets):
            if idx >= len(auxes):
                log.warning("frame %s: no aux row for detection %d, kept as-is", frame, idx)
                refined.append(det)
                continue
            try:
                refined.append(_refine_detection(det, auxes[idx], images, rig, cfg))
            except Exception as exc:
                log.warning("frame %s object %d refine failed: %s", frame, idx, exc)
                refined.append(det)
        with open(os.path.join(out_data, frame + ".txt"), "w") as fh:
            fh.write(write_labels(refined))
    return 0


def _refine_detection(det, aux, images, rig, cfg: RunConfig):
    h, w, l = det.dims
    x, y, z = det.location
    theta = det.rotation_y
    m5 = measurements_from_pixels(det.bbox, aux.kp_u_px, rig)
    if cfg.dense_alignment:
        vr, _ = shrink_visible_range(aux.visible_range, cfg.kappa)
        result = dense_align(
            images[0], images[1], vr, (det.bbox.v1, det.bbox.v2),
            z, (cfg.align_half_window, cfg.align_steps), rig,
        )
        z = result.z
    if cfg.box_estimation:
        pose = estimate_box_pose(
            m5, (w, h, l), z, (x, y, theta), cfg.gn(), kp_type=aux.kp_corner
        )
        x, y, theta = pose.x, pose.y, pose.theta
    return dataclasses.replace(det, location=(x, y, z), rotation_y=theta)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stereobox", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene directory")
    p.add_argument("spec", help="scene spec file (key = value)")
    p.add_argument("--out", required=True, help="output scene directory")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("estimate", help="run the estimation pipeline over a scene")
    p.add_argument("scene_dir")
    p.add_argument("out_dir")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("eval", help="AP table for detections against labels")
    p.add_argument("gt_dir", help="directory of ground-truth label files")
    p.add_argument("det_dir", help="detection directory (or its parent with data/)")
    p.add_argument("--ap-mode", choices=("11", "40"), default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None, help="also write the table to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("refine", help="re-run geometric refinement on detections")
    p.add_argument("scene_dir")
    p.add_argument("det_dir")
    p.add_argument("out_dir")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_refine)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except Exception as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
