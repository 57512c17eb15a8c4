"""Local cost volumes over depth levels and the instance-depth head.

A cost volume stacks, for every candidate depth level, the left feature
patch next to the right feature patch warped by that level's disparity.
Each level is scored by the cosine similarity of its two halves and the
volume can be reweighted by those scores and gated by a bird's-eye-view
attention map before the softmax depth head turns it into a probability
mass over depth levels.

Feature maps are plain float arrays of shape (C, H, W). All operations
are pure; convolution weights are deterministic pseudo-random from a
seed (nothing here is trained).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraRig, DepthGrid, Rect, disparity_from_depth


@dataclass(frozen=True)
class CostVolume:
    """Per-level concatenation of the left patch and the warped right patch.

    block has shape (2C, n, h, w): channels 0..C-1 are the left half,
    C..2C-1 the right half; axis 1 runs over grid.levels.
    """

    grid: DepthGrid
    block: np.ndarray
    roi_meta: tuple[Rect, Rect]

    def __post_init__(self):
        blk = np.asarray(self.block, dtype=float)
        if blk.ndim != 4:
            raise ValueError(f"cost volume block must be 4D, got shape {blk.shape}")
        if blk.shape[0] % 2 != 0:
            raise ValueError(f"channel count {blk.shape[0]} must be even (two halves)")
        if blk.shape[1] != self.grid.n:
            raise ValueError(f"block depth extent {blk.shape[1]} != grid.n {self.grid.n}")
        if not np.all(np.isfinite(blk)):
            raise ValueError("cost volume contains non-finite values")
        object.__setattr__(self, "block", blk)

    @property
    def half_channels(self) -> int:
        return self.block.shape[0] // 2


@dataclass(frozen=True)
class DepthPMF:
    """Normalized probability over the levels of a DepthGrid."""

    grid: DepthGrid
    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if p.shape != (self.grid.n,):
            raise ValueError(f"probability shape {p.shape} != ({self.grid.n},)")
        if np.any(p < -1e-12):
            raise ValueError("probabilities must be non-negative")
        if abs(p.sum() - 1.0) > 1e-6:
            raise ValueError(f"probabilities sum to {p.sum()}, expected 1 within 1e-6")
        object.__setattr__(self, "p", np.clip(p, 0.0, None))


def roi_align(fm: np.ndarray, roi: Rect, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear RoI pooling with one sample per output cell center.

    Feature cell (r, c) has its center at continuous coordinates
    (c + 0.5, r + 0.5). Sample points outside the map clamp to the border.
    """
    fm = np.asarray(fm, dtype=float)
    if fm.ndim != 3:
        raise ValueError(f"feature map must be (C, H, W), got shape {fm.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output dims must be >= 1, got ({out_h}, {out_w})")

    ys = roi.v1 + (np.arange(out_h) + 0.5) * (roi.height / out_h)
    xs = roi.u1 + (np.arange(out_w) + 0.5) * (roi.width / out_w)
    return _bilinear_grid(fm, ys, xs)


def _bilinear_grid(fm: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample fm (C, H, W) at the outer product of continuous ys and xs."""
    _, h, w = fm.shape
    qy = np.clip(ys - 0.5, 0.0, h - 1.0)
    qx = np.clip(xs - 0.5, 0.0, w - 1.0)
    y0 = np.floor(qy).astype(int)
    x0 = np.floor(qx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (qy - y0)[None, :, None]
    wx = (qx - x0)[None, None, :]
    top = fm[:, y0][:, :, x0] * (1 - wx) + fm[:, y0][:, :, x1] * wx
    bot = fm[:, y1][:, :, x0] * (1 - wx) + fm[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def build_cost_volume(
    left: np.ndarray,
    right: np.ndarray,
    left_roi: Rect,
    right_roi: Rect,
    grid: DepthGrid,
    rig: CameraRig,
    out_h: int,
    out_w: int,
) -> CostVolume:
    """Plane-sweep cost volume over the grid's depth levels.

    The left patch is pooled once from left_roi. For each level i the right
    map is pooled from left_roi shifted left by the level's disparity
    (sub-pixel shifts via bilinear sampling), so a level whose disparity
    matches the object's places identical content in both halves.
    right_roi records the detector's right-image box in roi_meta.
    """
    left = np.asarray(left, dtype=float)
    right = np.asarray(right, dtype=float)
    if left.shape != right.shape:
        raise ValueError(f"left/right shapes differ: {left.shape} vs {right.shape}")
    c = left.shape[0]
    block = np.empty((2 * c, grid.n, out_h, out_w))
    left_patch = roi_align(left, left_roi, out_h, out_w)
    for i, z in enumerate(grid.levels):
        d = disparity_from_depth(float(z), rig)
        block[:c, i] = left_patch
        block[c:, i] = roi_align(right, left_roi.shifted(du=-d), out_h, out_w)
    return CostVolume(grid, block, (left_roi, right_roi))


def match_scores(cv: CostVolume) -> np.ndarray:
    """Per-level cosine similarity between the two halves of the volume.

    A zero-norm half scores 0 (the cosine is undefined there).
    """
    c = cv.half_channels
    n = cv.grid.n
    lhs = cv.block[:c].reshape(c, n, -1).transpose(1, 0, 2).reshape(n, -1)
    rhs = cv.block[c:].reshape(c, n, -1).transpose(1, 0, 2).reshape(n, -1)
    dots = np.einsum("ij,ij->i", lhs, rhs)
    norms = np.linalg.norm(lhs, axis=1) * np.linalg.norm(rhs, axis=1)
    scores = np.where(norms > 0, dots / np.where(norms > 0, norms, 1.0), 0.0)
    return np.clip(scores, -1.0, 1.0)


def match_reweight(cv: CostVolume) -> CostVolume:
    """Scale each depth level of the volume by its match score."""
    s = match_scores(cv)
    return CostVolume(cv.grid, cv.block * s[None, :, None, None], cv.roi_meta)


@dataclass(frozen=True)
class GateConv:
    """Same-padded 2D convolution producing the attention gate logits."""

    weights: np.ndarray  # (C_out, C_in, k, k)
    bias: np.ndarray  # (C_out,)

    @classmethod
    def from_seed(cls, channels: int, kernel: int = 3, seed: int = 0) -> "GateConv":
        rng = np.random.default_rng(seed)
        scale = np.sqrt(2.0 / (channels * kernel * kernel))
        return cls(
            rng.normal(0.0, scale, size=(channels, channels, kernel, kernel)),
            rng.normal(0.0, 0.1, size=channels),
        )

    @classmethod
    def zeros(cls, channels: int, kernel: int = 3) -> "GateConv":
        return cls(np.zeros((channels, channels, kernel, kernel)), np.zeros(channels))


def _conv2d_same(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """x (C_in, H, W) -> (C_out, H, W), zero padding, odd square kernels."""
    k = weights.shape[-1]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    return np.einsum("chwij,ocij->ohw", win, weights) + bias[:, None, None]


def _conv3d_same(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """x (C_in, D, H, W) -> (C_out, D, H, W), zero padding, odd cubic kernels."""
    k = weights.shape[-1]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    return np.einsum("cdhwijk,ocijk->odhw", win, weights) + bias[:, None, None, None]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))


def structure_attention(cv: CostVolume, gate: GateConv) -> CostVolume:
    """Bird's-eye-view gating of the cost volume.

    The volume is averaged over its height axis to a (2C, n, w) BEV map,
    passed through one same-padded 2D convolution and a sigmoid, and the
    resulting gate multiplies the volume with a residual add:
    out = sigmoid(conv(mean_H(G))) * G + G.
    """
    if gate.weights.shape[1] != cv.block.shape[0]:
        raise ValueError(
            f"gate expects {gate.weights.shape[1]} channels, volume has {cv.block.shape[0]}"
        )
    bev = cv.block.mean(axis=2)  # (2C, n, w)
    g = _sigmoid(_conv2d_same(bev, gate.weights, gate.bias))
    out = g[:, :, None, :] * cv.block + cv.block
    return CostVolume(cv.grid, out, cv.roi_meta)


@dataclass(frozen=True)
class ConvStack:
    """Deterministic weights for the two-stage 3D depth head.

    Stage 1: two same-padded 3x3x3 convolutions (2C -> C -> C) with ReLU,
    then 2x spatial max pooling. Stage 2: two more convolutions (C -> C)
    with ReLU, 4x spatial max pooling, a 1x1x1 projection to one channel,
    and a global spatial mean leaving one logit per depth level.
    """

    in_channels: int
    mid_channels: int
    kernel: int
    seed: int
    convs: tuple = field(repr=False, default=())
    proj: tuple = field(repr=False, default=())

    @classmethod
    def from_seed(cls, in_channels: int, mid_channels: int | None = None,
                  kernel: int = 3, seed: int = 0) -> "ConvStack":
        if in_channels % 2 != 0:
            raise ValueError(f"in_channels must be even, got {in_channels}")
        mid = mid_channels if mid_channels is not None else max(1, in_channels // 2)
        rng = np.random.default_rng(seed)
        plan = [(in_channels, mid), (mid, mid), (mid, mid), (mid, mid)]
        convs = []
        for c_in, c_out in plan:
            scale = np.sqrt(2.0 / (c_in * kernel**3))
            convs.append(
                (
                    rng.normal(0.0, scale, size=(c_out, c_in, kernel, kernel, kernel)),
                    rng.normal(0.0, 0.05, size=c_out),
                )
            )
        proj = (rng.normal(0.0, np.sqrt(2.0 / mid), size=(1, mid, 1, 1, 1)),
                rng.normal(0.0, 0.05, size=1))
        return cls(in_channels, mid, kernel, seed, tuple(convs), tuple(proj))


def _maxpool_spatial(x: np.ndarray, factor: int) -> np.ndarray:
    """Max pooling over the last two axes with ceil semantics."""
    c, d, h, w = x.shape
    ph = (-h) % factor
    pw = (-w) % factor
    xp = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), constant_values=-np.inf)
    hh, ww = xp.shape[2] // factor, xp.shape[3] // factor
    return xp.reshape(c, d, hh, factor, ww, factor).max(axis=(3, 5))


def softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - np.max(logits))
    return e / e.sum()


def pmf_from_logits(grid: DepthGrid, logits: np.ndarray) -> DepthPMF:
    """Softmax-normalize raw per-level logits into a DepthPMF."""
    logits = np.asarray(logits, dtype=float)
    if logits.shape != (grid.n,):
        raise ValueError(f"logit shape {logits.shape} != ({grid.n},)")
    return DepthPMF(grid, softmax(logits))


def depth_head(cv: CostVolume, stack: ConvStack, logits_override: np.ndarray | None = None) -> DepthPMF:
    """Run the two-stage convolutional head and softmax over depth levels.

    logits_override bypasses the convolutions and feeds the given per-level
    logits straight into the softmax (test hook).
    """
    if logits_override is not None:
        return pmf_from_logits(cv.grid, logits_override)
    if stack.in_channels != cv.block.shape[0]:
        raise ValueError(
            f"stack expects {stack.in_channels} channels, volume has {cv.block.shape[0]}"
        )
    x = cv.block
    for i, (w, b) in enumerate(stack.convs):
        x = np.maximum(_conv3d_same(x, w, b), 0.0)
        if i == 1:
            x = _maxpool_spatial(x, 2)
    x = _maxpool_spatial(x, 4)
    w, b = stack.proj
    x = np.tensordot(w[:, :, 0, 0, 0], x, axes=(1, 0)) + b[:, None, None, None]
    logits = x[0].mean(axis=(1, 2))
    return pmf_from_logits(cv.grid, logits)


def expected_depth(pmf: DepthPMF) -> float:
    """Probability-weighted mean depth over the grid levels."""
    return float(np.dot(pmf.grid.levels, pmf.p))


def expected_depth_grad(pmf: DepthPMF) -> tuple[np.ndarray, np.ndarray]:
    """Partials of the expected depth.

    Returns (d/dp, d/dlogit): the gradient wrt the probabilities is the
    level vector itself; composed with the softmax it is p_j*(z_j - zhat).
    """
    zhat = expected_depth(pmf)
    return pmf.grid.levels.copy(), pmf.p * (pmf.grid.levels - zhat)


def depth_loss(pred, gt) -> float:
    """Mean absolute depth error."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.ndim != 1 or pred.size == 0:
        raise ValueError(f"need equal-length non-empty vectors, got {pred.shape} vs {gt.shape}")
    return float(np.mean(np.abs(pred - gt)))
