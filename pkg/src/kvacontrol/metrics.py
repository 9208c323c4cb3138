"""Mask-based action-faithfulness metrics.

Exact Euclidean distance transform (two-pass lower-envelope-of-parabolas on
squared distances), symmetric Chamfer distance, temporal IoU, area flicker,
Dice, and the per-sequence aggregation rules. Also renders fixed-width action
tubes from projected tool skeletons for use as ground-truth masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .kinematics import (
    PART_NAMES,
    PART_SEMANTIC_CLASS,
    BehindCamera,
    CameraModel,
    PartPoses,
    project_point,
)

INF = 1e18


def _edt_1d(f: np.ndarray) -> np.ndarray:
    """1-D squared-distance transform of a sampled function (lower envelope)."""
    n = f.size
    d = np.empty(n)
    v = np.zeros(n, dtype=int)
    z = np.empty(n + 1)
    k = 0
    z[0] = -INF
    z[1] = INF
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = INF
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) ** 2 + f[v[k]]
    return d


def _row_pass(mask: np.ndarray) -> np.ndarray:
    """Squared distance to the nearest foreground pixel within each row.

    Vectorized special case of the 1-D transform for binary input: the
    nearest foreground column on each side is found with cumulative scans.
    """
    h, w = mask.shape
    j = np.arange(w, dtype=float)
    left = np.maximum.accumulate(np.where(mask, j, -np.inf), axis=1)
    right = np.minimum.accumulate(np.where(mask, j, np.inf)[:, ::-1],
                                  axis=1)[:, ::-1]
    d = np.minimum(j - left, right - j)
    return np.where(np.isfinite(d), d * d, INF)


def distance_transform(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance to the nearest foreground pixel.

    Two passes: in-row squared distances, then the per-column lower envelope
    of parabolas rooted at those values. The column pass evaluates the full
    parabola minimum vectorized over columns for small heights and falls back
    to the sequential envelope otherwise; both are exact.

    Empty masks yield all-inf (callers treat that as the empty-mask sentinel).
    """
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        return np.full(mask.shape, np.inf)
    g = _row_pass(mask)
    h = g.shape[0]
    if h <= 128:
        i = np.arange(h, dtype=float)
        d2 = ((i[:, None, None] - i[None, :, None]) ** 2 + g[None]).min(axis=1)
    else:
        d2 = np.empty_like(g)
        for j in range(g.shape[1]):
            d2[:, j] = _edt_1d(g[:, j])
    return np.sqrt(d2)


def chamfer(P: np.ndarray, T: np.ndarray):
    """Symmetric mean nearest-pixel distance between two binary masks.

    Returns (value, valid). valid is False (value nan) when either mask is
    empty; such frames are skipped and counted by the aggregator."""
    P = np.asarray(P).astype(bool)
    T = np.asarray(T).astype(bool)
    if not P.any() or not T.any():
        return float("nan"), False
    d_to_T = distance_transform(T)
    d_to_P = distance_transform(P)
    cd = 0.5 * (d_to_T[P].mean() + d_to_P[T].mean())
    return float(cd), True


def temporal_iou(P_t: np.ndarray, P_prev: np.ndarray) -> float:
    """IoU of consecutive masks; 1 when both are empty."""
    P_t = np.asarray(P_t).astype(bool)
    P_prev = np.asarray(P_prev).astype(bool)
    union = (P_t | P_prev).sum()
    if union == 0:
        return 1.0
    return float((P_t & P_prev).sum() / union)


def area_flicker(P_t: np.ndarray, P_prev: np.ndarray) -> float:
    """Relative frame-to-frame area change, previous area floored at 1."""
    a_t = int(np.asarray(P_t).astype(bool).sum())
    a_p = int(np.asarray(P_prev).astype(bool).sum())
    return abs(a_t - a_p) / max(a_p, 1)


def dice(A: np.ndarray, B: np.ndarray) -> float:
    """2|A^B| / (|A| + |B|); 1 when both are empty."""
    A = np.asarray(A).astype(bool)
    B = np.asarray(B).astype(bool)
    total = A.sum() + B.sum()
    if total == 0:
        return 1.0
    return float(2 * (A & B).sum() / total)


@dataclass
class MaskFrame:
    """Per-pixel labels: 0 background, 1 shaft, 2 wrist, 3 gripper."""

    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=int)
        if labels.min() < 0 or labels.max() > 3:
            raise ValueError("labels must be in {0, 1, 2, 3}")
        self.labels = labels

    @property
    def union(self) -> np.ndarray:
        return self.labels > 0

    def part_mask(self, label: int) -> np.ndarray:
        return self.labels == label


@dataclass
class MetricsReport:
    """Per-frame values plus means over valid frames; nan entries were skipped."""

    cd: list = dc_field(default_factory=list)
    ti: list = dc_field(default_factory=list)
    af: list = dc_field(default_factory=list)
    dice: list = dc_field(default_factory=list)
    mean_cd: float = float("nan")
    mean_ti: float = float("nan")
    mean_af: float = float("nan")
    mean_dice: float = float("nan")
    skipped_cd: int = 0


def _valid_mean(values):
    vals = [v for v in values if np.isfinite(v)]
    return float(np.mean(vals)) if vals else float("nan")


def aggregate(cd_values, ti_values, af_values, dice_values) -> MetricsReport:
    """Means over valid (finite) entries; skip counts recorded for Chamfer."""
    report = MetricsReport(cd=list(cd_values), ti=list(ti_values),
                           af=list(af_values), dice=list(dice_values))
    report.mean_cd = _valid_mean(report.cd)
    report.mean_ti = _valid_mean(report.ti)
    report.mean_af = _valid_mean(report.af)
    report.mean_dice = _valid_mean(report.dice)
    report.skipped_cd = sum(1 for v in report.cd if not np.isfinite(v))
    return report


def evaluate_sequence(pred_frames, target_frames) -> MetricsReport:
    """CD per frame on instance (per-label) masks, TI/AF on consecutive
    predicted unions, Dice between predicted and target unions."""
    cds, tis, afs, dices = [], [], [], []
    prev_union = None
    for pf, tf in zip(pred_frames, target_frames):
        frame_cds = []
        for label in (1, 2, 3):
            pm, tm = pf.part_mask(label), tf.part_mask(label)
            if not pm.any() and not tm.any():
                continue
            value, valid = chamfer(pm, tm)
            frame_cds.append(value if valid else float("nan"))
        if frame_cds:
            cds.append(float(np.nanmean(frame_cds))
                       if any(np.isfinite(v) for v in frame_cds) else float("nan"))
        else:
            cds.append(float("nan"))
        union = pf.union
        if prev_union is not None:
            tis.append(temporal_iou(union, prev_union))
            afs.append(area_flicker(union, prev_union))
        dices.append(dice(union, tf.union))
        prev_union = union
    return aggregate(cds, tis, afs, dices)


def _point_segment_dist2(px, py, ax, ay, bx, by):
    vx, vy = bx - ax, by - ay
    wx, wy = px - ax, py - ay
    seg2 = vx * vx + vy * vy
    t = 0.0 if seg2 == 0 else np.clip((wx * vx + wy * vy) / seg2, 0.0, 1.0)
    dx, dy = wx - t * vx, wy - t * vy
    return dx * dx + dy * dy


def render_tube(poses: PartPoses, cam: CameraModel, half_width: float = 3.0):
    """Label mask from the projected tool skeleton, drawn as fixed-width tubes.

    Overlaps are resolved front-most by the segment midpoint depth."""
    h, w = cam.height, cam.width
    labels = np.zeros((h, w), dtype=int)
    best_z = np.full((h, w), np.inf)
    hw2 = half_width * half_width
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    for part in PART_NAMES:
        a, b = poses.endpoints[part]
        try:
            ua, va, za = project_point(cam, a)
            ub, vb, zb = project_point(cam, b)
        except BehindCamera:
            continue
        d2 = _point_segment_dist2(jj.astype(float), ii.astype(float), ua, va, ub, vb)
        z_mid = 0.5 * (za + zb)
        hit = (d2 <= hw2) & (z_mid < best_z)
        labels[hit] = PART_SEMANTIC_CLASS[part] + 1
        best_z[hit] = z_mid
    return labels
