"""Segmentation scoring against a ground-truth mask.

Dice and the under/over-segmentation scores come straight from the class
confusion matrix.  Normalized Surface Dice is computed from 2-D class
boundaries extracted independently in every B-scan; nearest-boundary
distances are read from an exact Euclidean distance transform and pooled
over the whole volume.

Undefined scores (0/0 cases) are returned as ``None``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Optional

import numpy as np
from scipy import ndimage

from .core import LABELS, N_CLASSES, LabelMask, class_id, validate_pair
from .errors import ValidationError

DEFAULT_TAU_PX = 10.0
DEFAULT_CUTOFF = 0.2


@dataclass(frozen=True)
class NsdConfig:
    tau_px: float = DEFAULT_TAU_PX

    def __post_init__(self):
        if not (self.tau_px > 0 and np.isfinite(self.tau_px)):
            raise ValidationError(f"tau_px must be positive, got {self.tau_px}")


@dataclass(frozen=True)
class ClassScores:
    class_id: int
    class_name: str
    dice: Optional[float]
    nsd: float
    uss: Optional[float]
    oss: Optional[float]
    gt_present: bool
    pred_present: bool

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SegBias:
    under: bool
    over: bool
    note: str = ""


# -- confusion-matrix metrics -------------------------------------------------

def confusion(gt, pred, n_classes: int = N_CLASSES) -> np.ndarray:
    """Voxel-count confusion matrix, ``cm[i, j]`` = truth ``i`` predicted ``j``.

    Accepts ``LabelMask`` objects (validated as a pair) or raw integer arrays
    of equal shape.
    """
    if isinstance(gt, LabelMask) or isinstance(pred, LabelMask):
        gt, pred = validate_pair(gt, pred)
        g, p = gt.labels, pred.labels
    else:
        g, p = np.asarray(gt), np.asarray(pred)
        if g.shape != p.shape:
            raise ValidationError(f"shape mismatch: {g.shape} vs {p.shape}")
    idx = g.astype(np.int64).ravel() * n_classes + p.astype(np.int64).ravel()
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def _tp_fp_fn(cm: np.ndarray, c: int) -> tuple[int, int, int]:
    tp = int(cm[c, c])
    fp = int(cm[:, c].sum()) - tp
    fn = int(cm[c, :].sum()) - tp
    return tp, fp, fn


def dice(cm: np.ndarray, c) -> Optional[float]:
    """2TP / (2TP + FP + FN); ``None`` when the class is absent from both masks."""
    tp, fp, fn = _tp_fp_fn(cm, _cid(cm, c))
    denom = 2 * tp + fp + fn
    if denom == 0:
        return None
    return 2 * tp / denom


def uss_oss(cm: np.ndarray, c) -> tuple[Optional[float], Optional[float]]:
    """Under- and over-segmentation scores for class ``c``.

    USS is the share of the class's ground-truth voxels assigned elsewhere
    (row-wise), OSS the share of the class's predicted voxels that belong to
    other classes (column-wise).
    """
    c = _cid(cm, c)
    row = int(cm[c, :].sum())
    col = int(cm[:, c].sum())
    tp = int(cm[c, c])
    uss = (row - tp) / row if row else None
    oss = (col - tp) / col if col else None
    return uss, oss


def flag_seg_bias(scores: ClassScores, cutoff: float = DEFAULT_CUTOFF) -> SegBias:
    notes = []
    if scores.uss is None:
        notes.append("USS not applicable")
    if scores.oss is None:
        notes.append("OSS not applicable")
    return SegBias(
        under=scores.uss is not None and scores.uss > cutoff,
        over=scores.oss is not None and scores.oss > cutoff,
        note="; ".join(notes),
    )


def _cid(cm, c) -> int:
    if isinstance(c, str):
        return class_id(c)
    c = int(c)
    if not 0 <= c < cm.shape[0]:
        raise ValidationError(f"class {c} outside confusion matrix of size {cm.shape[0]}")
    return c


# -- surface distances --------------------------------------------------------

def boundary(region: np.ndarray) -> np.ndarray:
    """Boundary pixels of a binary region, per 2-D plane.

    A pixel is on the boundary when it belongs to the region and at least one
    of its 4-neighbours in the same plane does not, or it touches the image
    border.  The last two axes are the plane.
    """
    region = np.asarray(region, dtype=bool)
    pad = [(0, 0)] * (region.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(region, pad, constant_values=False)
    interior = (
        p[..., :-2, 1:-1] & p[..., 2:, 1:-1] & p[..., 1:-1, :-2] & p[..., 1:-1, 2:]
    )
    return region & ~interior


def _nearest_sq_dist(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Squared distance from each ``src`` pixel to the nearest ``dst`` pixel.

    Both inputs are 2-D boolean planes.  Returns an int64 vector in the
    row-major order of ``src``'s true pixels; ``-1`` marks "no target".
    """
    rows, cols = np.nonzero(src)
    if rows.size == 0:
        return np.empty(0, dtype=np.int64)
    if not dst.any():
        return np.full(rows.size, -1, dtype=np.int64)
    # feature transform of the complement gives, per pixel, the nearest dst pixel
    idx = ndimage.distance_transform_edt(~dst, return_distances=False, return_indices=True)
    dr = idx[0][rows, cols].astype(np.int64) - rows
    dc = idx[1][rows, cols].astype(np.int64) - cols
    return dr * dr + dc * dc


def surface_sq_distances(gt_region: np.ndarray, pred_region: np.ndarray):
    """Directed squared boundary distances pooled over B-scans.

    Returns ``(pred_to_gt, gt_to_pred)`` as int64 arrays; ``-1`` entries mark
    boundary pixels in a plane where the other mask has no boundary at all
    (infinite distance).
    """
    gb = boundary(gt_region)
    pb = boundary(pred_region)
    if gb.ndim == 2:
        gb, pb = gb[None], pb[None]
    p2g, g2p = [], []
    for g_plane, p_plane in zip(gb, pb):
        p2g.append(_nearest_sq_dist(p_plane, g_plane))
        g2p.append(_nearest_sq_dist(g_plane, p_plane))
    return np.concatenate(p2g), np.concatenate(g2p)


def _within(sq: np.ndarray, tau: float) -> int:
    finite = sq >= 0
    return int(np.count_nonzero(np.sqrt(sq[finite]) <= tau))


def nsd_binary(gt_region: np.ndarray, pred_region: np.ndarray, tau_px: float = DEFAULT_TAU_PX) -> float:
    """NSD between two binary regions (planes along the last two axes)."""
    gt_region = np.asarray(gt_region, dtype=bool)
    pred_region = np.asarray(pred_region, dtype=bool)
    if gt_region.shape != pred_region.shape:
        raise ValidationError(f"shape mismatch: {gt_region.shape} vs {pred_region.shape}")
    g_any, p_any = gt_region.any(), pred_region.any()
    if not g_any and not p_any:
        return 1.0
    if g_any != p_any:
        return 0.0
    p2g, g2p = surface_sq_distances(gt_region, pred_region)
    total = p2g.size + g2p.size
    return (_within(p2g, tau_px) + _within(g2p, tau_px)) / total


def nsd(gt: LabelMask, pred: LabelMask, c, cfg: NsdConfig = NsdConfig()) -> float:
    """Normalized Surface Dice of class ``c`` between two label masks.

    Both-absent scores 1.0 and present-in-one-only scores 0.0, for every
    class.
    """
    gt, pred = validate_pair(gt, pred)
    cid = class_id(c)
    return nsd_binary(gt.labels == cid, pred.labels == cid, cfg.tau_px)


# -- volume-level scoring -----------------------------------------------------

def score_pair(
    gt: LabelMask,
    pred: LabelMask,
    tau_px: float = DEFAULT_TAU_PX,
    classes: Optional[Iterable[int]] = None,
) -> list[ClassScores]:
    """All per-class scores for one ground-truth/prediction pair."""
    gt, pred = validate_pair(gt, pred)
    cfg = NsdConfig(tau_px)
    cm = confusion(gt.labels, pred.labels)
    out = []
    for cid in (range(N_CLASSES) if classes is None else classes):
        cid = class_id(cid)
        uss, oss = uss_oss(cm, cid)
        out.append(
            ClassScores(
                class_id=cid,
                class_name=LABELS[cid].name,
                dice=dice(cm, cid),
                nsd=nsd_binary(gt.labels == cid, pred.labels == cid, cfg.tau_px),
                uss=uss,
                oss=oss,
                gt_present=bool(cm[cid, :].sum() > 0),
                pred_present=bool(cm[:, cid].sum() > 0),
            )
        )
    return out


def mean_defined(values: Iterable[Optional[float]]) -> Optional[float]:
    """Mean over defined entries; undefined (``None``) scores are excluded."""
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


SCORE_COLUMNS = (
    "volume_id", "class_name", "dice", "nsd", "uss", "oss",
    "under_flag", "over_flag", "gt_present", "pred_present",
)


def score_rows(volume_id: str, scores: list[ClassScores], cutoff: float = DEFAULT_CUTOFF) -> list[dict]:
    """Flatten scores into CSV-ready rows (one per class)."""
    rows = []
    for s in scores:
        bias = flag_seg_bias(s, cutoff)
        rows.append({
            "volume_id": volume_id,
            "class_name": s.class_name,
            "dice": s.dice,
            "nsd": s.nsd,
            "uss": s.uss,
            "oss": s.oss,
            "under_flag": bias.under,
            "over_flag": bias.over,
            "gt_present": s.gt_present,
            "pred_present": s.pred_present,
        })
    return rows
