"""KITTI object-detection file formats: calibration, labels, difficulty.

Writers use a canonical float format (shortest repr, at least two
decimals) so parse -> write round trips are byte-exact on canonical
files. In synthetic labels 'location' is the 3D box center.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .geometry import CameraRig, Rect


class KittiParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class Difficulty(enum.IntEnum):
    EASY = 0
    MODERATE = 1
    HARD = 2
    IGNORED = 3


# Devkit bucket thresholds: (min box height px, max occlusion, max truncation).
DIFFICULTY_THRESHOLDS: dict[Difficulty, tuple[float, int, float]] = {
    Difficulty.EASY: (40.0, 0, 0.15),
    Difficulty.MODERATE: (25.0, 1, 0.30),
    Difficulty.HARD: (25.0, 2, 0.50),
}


@dataclass(frozen=True)
class ObjectRecord:
    cls: str
    truncation: float
    occlusion: int
    alpha: float
    bbox: Rect
    dims: tuple[float, float, float]  # (h, w, l)
    location: tuple[float, float, float]  # (x, y, z)
    rotation_y: float
    score: float | None = None


@dataclass(frozen=True)
class CalibBundle:
    """Left/right 3x4 projection matrices and the derived stereo rig."""

    p_left: np.ndarray
    p_right: np.ndarray
    rig: CameraRig


def _fmt(x: float) -> str:
    """Canonical float: shortest round-trip repr, padded to >= 2 decimals."""
    if x != x or math.isinf(x):
        raise ValueError(f"cannot format non-finite value {x}")
    s = repr(float(x))
    if "e" in s or "E" in s:
        s = np.format_float_positional(float(x), trim="0")
    if "." not in s:
        s += ".00"
    else:
        decimals = len(s) - s.index(".") - 1
        s += "0" * max(0, 2 - decimals)
    return s


def parse_calib(text: str) -> CalibBundle:
    """Extract P2/P3 (left/right projection) rows from a calib file.

    The rig reads fu = P2[0,0], fv = P2[1,1], (cu, cv) = P2[0:2, 2] and
    b = -P3[0,3]/fu. Any additional calib entries are ignored.
    """
    mats: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped:
            continue
        key, _, rest = stripped.partition(":")
        key = key.strip()
        if key not in ("P2", "P3"):
            continue
        tokens = rest.split()
        if len(tokens) != 12:
            raise KittiParseError(f"{key} has {len(tokens)} values, expected 12", lineno)
        try:
            values = [float(t) for t in tokens]
        except ValueError as exc:
            raise KittiParseError(f"bad float in {key}: {exc}", lineno) from None
        mats[key] = np.array(values).reshape(3, 4)
    for key in ("P2", "P3"):
        if key not in mats:
            raise KittiParseError(f"missing {key} line")
    p2, p3 = mats["P2"], mats["P3"]
    fu = p2[0, 0]
    if abs(p3[0, 0] - fu) > 1e-6 * abs(fu):
        raise KittiParseError(f"P2/P3 focal lengths differ: {fu} vs {p3[0, 0]}")
    rig = CameraRig(fu=fu, fv=p2[1, 1], cu=p2[0, 2], cv=p2[1, 2], b=-p3[0, 3] / fu)
    return CalibBundle(p2, p3, rig)


def write_calib(rig: CameraRig) -> str:
    """Render a rig as P2/P3 lines (right camera offset by -fu*b)."""
    p2 = [rig.fu, 0.0, rig.cu, 0.0, 0.0, rig.fv, rig.cv, 0.0, 0.0, 0.0, 1.0, 0.0]
    p3 = list(p2)
    p3[3] = -rig.fu * rig.b
    lines = ["P2: " + " ".join(_fmt(v) for v in p2), "P3: " + " ".join(_fmt(v) for v in p3)]
    return "\n".join(lines) + "\n"


def _parse_label_line(line: str, lineno: int) -> ObjectRecord:
    fields = line.split()
    if len(fields) not in (15, 16):
        raise KittiParseError(f"{len(fields)} fields, expected 15 or 16", lineno)
    try:
        vals = [float(f) for f in fields[1:]]
    except ValueError as exc:
        raise KittiParseError(f"bad float: {exc}", lineno) from None
    try:
        bbox = Rect(vals[3], vals[4], vals[5], vals[6])
    except ValueError as exc:
        raise KittiParseError(str(exc), lineno) from None
    return ObjectRecord(
        cls=fields[0],
        truncation=vals[0],
        occlusion=int(vals[1]),
        alpha=vals[2],
        bbox=bbox,
        dims=(vals[7], vals[8], vals[9]),
        location=(vals[10], vals[11], vals[12]),
        rotation_y=vals[13],
        score=vals[14] if len(fields) == 16 else None,
    )


def parse_labels(text: str) -> list[ObjectRecord]:
    """Parse a label/detection file: one 15- or 16-field row per object."""
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            records.append(_parse_label_line(line, lineno))
    return records


def write_labels(records: list[ObjectRecord]) -> str:
    """Render records in file order with canonical float formatting."""
    lines = []
    for rec in records:
        fields = [
            rec.cls,
            _fmt(rec.truncation),
            str(int(rec.occlusion)),
            _fmt(rec.alpha),
            _fmt(rec.bbox.u1),
            _fmt(rec.bbox.v1),
            _fmt(rec.bbox.u2),
            _fmt(rec.bbox.v2),
            _fmt(rec.dims[0]),
            _fmt(rec.dims[1]),
            _fmt(rec.dims[2]),
            _fmt(rec.location[0]),
            _fmt(rec.location[1]),
            _fmt(rec.location[2]),
            _fmt(rec.rotation_y),
        ]
        if rec.score is not None:
            fields.append(_fmt(rec.score))
        lines.append(" ".join(fields))
    return "\n".join(lines) + ("\n" if lines else "")


def difficulty_of(rec: ObjectRecord, thresholds=None) -> Difficulty:
    """Assign the easiest difficulty bucket whose thresholds the record meets."""
    thresholds = thresholds or DIFFICULTY_THRESHOLDS
    height = rec.bbox.height
    for level in (Difficulty.EASY, Difficulty.MODERATE, Difficulty.HARD):
        min_h, max_occ, max_trunc = thresholds[level]
        if height >= min_h and rec.occlusion <= max_occ and rec.truncation <= max_trunc:
            return level
    return Difficulty.IGNORED
