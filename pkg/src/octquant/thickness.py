"""Layer thickness, pathology accumulation and ETDRS sector statistics.

En-face grids are indexed ``[b, x]``: row ``b`` is the B-scan (row 0 drawn
at the top, the superior side), column ``x`` the A-scan (column 0 at the
left edge).  All physical coordinates are micrometres unless a name says
``mm``.

Surfaces follow a voxel-face convention: the upper surface of a layer sits
on the top face of its topmost voxel and the lower surface on the bottom
face of its bottommost voxel, so a layer spanning ``n`` voxels along an
A-scan measures ``n * axial_um``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .core import (
    BOUNDED_LAYERS,
    CHOROID,
    LABELS,
    PATHOLOGIES,
    VITREOUS,
    LabelMask,
    VoxelSpacing,
    label,
)
from .errors import CenterOutOfField, EmptySurface, UnboundedLayer, ValidationError

MAP_SHAPE = (350, 350)
SECTORS = ("CS", "SI", "NI", "II", "TI", "SO", "NO", "IO", "TO")
SECTOR_TITLES = {
    "CS": "Central Subfield",
    "SI": "Superior Inner",
    "NI": "Nasal Inner",
    "II": "Inferior Inner",
    "TI": "Temporal Inner",
    "SO": "Superior Outer",
    "NO": "Nasal Outer",
    "IO": "Inferior Outer",
    "TO": "Temporal Outer",
}
ETDRS_RADII_MM = (0.5, 1.5, 3.0)


# -- surfaces -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LayerSurface:
    """One boundary of a layer as a point cloud.

    ``columns`` holds the ``(b, x)`` grid index of every point and ``points``
    the matching physical ``(y, z, x)`` coordinates.
    """

    columns: np.ndarray
    points: np.ndarray
    grid_shape: tuple[int, int]
    spacing: VoxelSpacing

    def __len__(self):
        return len(self.points)


def _column_extent(present: np.ndarray):
    """Top and bottom voxel index along Z for every (b, x) column."""
    any_ = present.any(axis=1)
    z = present.shape[1]
    top = np.argmax(present, axis=1)
    bottom = z - 1 - np.argmax(present[:, ::-1, :], axis=1)
    return any_, top, bottom


def _surface(b, x, z_um, grid_shape, spacing) -> LayerSurface:
    pts = np.column_stack([b * spacing.bscan_um, z_um, x * spacing.lateral_um]).astype(np.float64)
    cols = np.column_stack([b, x]).astype(np.int64)
    return LayerSurface(cols, pts, grid_shape, spacing)


def extract_surfaces(mask: LabelMask, layer) -> tuple[LayerSurface, LayerSurface]:
    """Upper and lower boundary point clouds of a bounded retinal layer."""
    info = label(layer)
    if not (info.is_layer and info.bounded):
        if not info.bounded:
            raise UnboundedLayer(f"{info.name} is unbounded on one side and has no thickness")
        raise ValidationError(f"{info.name} is not a retinal layer")
    sp = mask.spacing
    present = mask.labels == info.id
    any_, top, bottom = _column_extent(present)
    b, x = np.nonzero(any_)
    grid = (mask.dims[0], mask.dims[2])
    upper = _surface(b, x, top[b, x] * sp.axial_um, grid, sp)
    lower = _surface(b, x, (bottom[b, x] + 1) * sp.axial_um, grid, sp)
    return upper, lower


def knn_thickness(upper: LayerSurface, lower: LayerSurface) -> np.ndarray:
    """Distance from every upper-surface point to its nearest lower-surface point.

    Returns a ``(B, X)`` grid in micrometres; columns without an upper point
    are NaN.
    """
    if len(upper) == 0 or len(lower) == 0:
        raise EmptySurface("both surfaces must contain at least one point")
    tree = cKDTree(lower.points)
    _, idx = tree.query(upper.points, k=1)
    # recompute with a fixed formula so results do not depend on tree internals
    d = np.sqrt(((upper.points - lower.points[idx]) ** 2).sum(axis=1))
    out = np.full(upper.grid_shape, np.nan)
    out[upper.columns[:, 0], upper.columns[:, 1]] = d
    return out


def brute_force_thickness(upper: LayerSurface, lower: LayerSurface) -> np.ndarray:
    """O(n*m) nearest-point reference for :func:`knn_thickness`."""
    out = np.full(upper.grid_shape, np.nan)
    lp = lower.points
    for (b, x), p in zip(upper.columns, upper.points):
        out[b, x] = np.sqrt(((p - lp) ** 2).sum(axis=1)).min()
    return out


# -- maps ---------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ThicknessMap:
    """En-face scalar map over the scan field.

    ``semantics`` is ``"mean"`` for layer thickness (values in um) and
    ``"sum"`` for pathology accumulation (um^3 per cell).  Missing cells are
    NaN.
    """

    values: np.ndarray
    semantics: str
    name: str = ""
    laterality: str = "OD"
    field_of_view_mm: tuple[float, float] = (6.0, 6.0)
    units: str = field(default="")

    def __post_init__(self):
        if self.semantics not in ("mean", "sum"):
            raise ValidationError(f"semantics must be 'mean' or 'sum', got {self.semantics!r}")
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.ndim != 2:
            raise ValidationError("map values must be 2-D")
        if np.any(v[~np.isnan(v)] < 0):
            raise ValidationError("map values must be non-negative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if not self.units:
            object.__setattr__(self, "units", "um" if self.semantics == "mean" else "um3")

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    @property
    def aggregation(self) -> str:
        return self.semantics


def _bilinear_weights(n_src: int, n_dst: int) -> np.ndarray:
    """Cell-centred linear interpolation matrix of shape (n_dst, n_src)."""
    w = np.zeros((n_dst, n_src))
    u = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    u = np.clip(u, 0.0, n_src - 1)
    i0 = np.floor(u).astype(int)
    i1 = np.minimum(i0 + 1, n_src - 1)
    frac = u - i0
    rows = np.arange(n_dst)
    np.add.at(w, (rows, i0), 1.0 - frac)
    np.add.at(w, (rows, i1), frac)
    w[w < 1e-15] = 0.0
    return w


def _overlap_weights(n_src: int, n_dst: int) -> np.ndarray:
    """Area-overlap matrix (n_dst, n_src); every source column sums to one."""
    src_edges = np.arange(n_src + 1) * (n_dst / n_src)
    w = np.zeros((n_dst, n_src))
    for i in range(n_src):
        lo, hi = src_edges[i], src_edges[i + 1]
        j0, j1 = int(math.floor(lo)), min(int(math.ceil(hi)), n_dst)
        for j in range(j0, j1):
            ov = min(hi, j + 1) - max(lo, j)
            if ov > 0:
                w[j, i] = ov
        w[:, i] /= w[:, i].sum()
    return w


def resample_map(raw: np.ndarray, semantics: str, shape: tuple[int, int] = MAP_SHAPE) -> np.ndarray:
    """Resample an en-face grid to ``shape`` (350 x 350 by default).

    Mean semantics use bilinear interpolation; sum semantics distribute each
    source cell's total over the target cells it overlaps, so the grand total
    is preserved.  A target cell is NaN only when every source cell feeding
    it is NaN.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape == tuple(shape):
        return raw.copy()
    if semantics == "mean":
        wy, wx = _bilinear_weights(raw.shape[0], shape[0]), _bilinear_weights(raw.shape[1], shape[1])
    elif semantics == "sum":
        wy, wx = _overlap_weights(raw.shape[0], shape[0]), _overlap_weights(raw.shape[1], shape[1])
    else:
        raise ValidationError(f"semantics must be 'mean' or 'sum', got {semantics!r}")
    valid = ~np.isnan(raw)
    filled = np.where(valid, raw, 0.0)
    num = wy @ filled @ wx.T
    cover = wy @ valid.astype(np.float64) @ wx.T
    support = (wy > 0).astype(np.float64) @ valid.astype(np.float64) @ (wx > 0).astype(np.float64).T
    out = np.full(shape, np.nan)
    ok = support > 0
    if semantics == "mean":
        out[ok] = num[ok] / cover[ok]
    else:
        out[ok] = num[ok]
    return out


def layer_thickness_raw(mask: LabelMask, layer) -> np.ndarray:
    upper, lower = extract_surfaces(mask, layer)
    if len(upper) == 0:
        return np.full((mask.dims[0], mask.dims[2]), np.nan)
    return knn_thickness(upper, lower)


def layer_thickness_map(mask: LabelMask, layer, shape: tuple[int, int] = MAP_SHAPE) -> ThicknessMap:
    info = label(layer)
    raw = layer_thickness_raw(mask, info.id)
    return ThicknessMap(resample_map(raw, "mean", shape), "mean", info.name, mask.laterality, mask.field_of_view_mm)


def retina_bounds(mask: LabelMask):
    """Per-column ILM and BM voxel indices (inclusive) and a validity grid.

    ILM is taken as the topmost non-vitreous voxel, BM as the bottommost voxel
    that is neither choroid nor a pathology class.
    """
    lab = mask.labels
    not_vit = lab != VITREOUS
    tissue = (lab != CHOROID) & (lab != VITREOUS)
    for p in PATHOLOGIES:
        tissue &= lab != p
    has_ilm, ilm, _ = _column_extent(not_vit)
    has_bm, _, bm = _column_extent(tissue)
    valid = has_ilm & has_bm & (bm >= ilm)
    return ilm, bm, valid


def pathology_counts(mask: LabelMask, pathology) -> np.ndarray:
    """Per-column count of pathology voxels between ILM and BM (int64 grid)."""
    info = label(pathology)
    if not info.is_pathology:
        raise ValidationError(f"{info.name} is not a pathology class")
    ilm, bm, valid = retina_bounds(mask)
    z = np.arange(mask.dims[1])[None, :, None]
    inside = (z >= ilm[:, None, :]) & (z <= bm[:, None, :]) & valid[:, None, :]
    return np.count_nonzero((mask.labels == info.id) & inside, axis=1).astype(np.int64)


def pathology_map(mask: LabelMask, pathology, shape: tuple[int, int] = MAP_SHAPE) -> ThicknessMap:
    """En-face accumulation of fluid or HRF volume (um^3 per map cell)."""
    info = label(pathology)
    counts = pathology_counts(mask, info.id)
    raw = counts * mask.spacing.voxel_volume_um3
    return ThicknessMap(resample_map(raw, "sum", shape), "sum", info.name, mask.laterality, mask.field_of_view_mm)


def class_map(mask: LabelMask, key, shape: tuple[int, int] = MAP_SHAPE) -> ThicknessMap:
    """Thickness map for layers, accumulation map for pathologies."""
    info = label(key)
    if info.is_pathology:
        return pathology_map(mask, info.id, shape)
    return layer_thickness_map(mask, info.id, shape)


# -- ETDRS grid ---------------------------------------------------------------

@dataclass(frozen=True)
class EtdrsSummary:
    sectors: dict
    laterality: str
    aggregation: str
    center_xy: tuple[float, float] = (3.0, 3.0)
    layer: str = ""
    cs_excluded: bool = False
    n_cells: dict = field(default_factory=dict)
    subject_id: Optional[str] = None

    def to_json(self) -> dict:
        d = {
            "layer": self.layer,
            "laterality": self.laterality,
            "aggregation": self.aggregation,
            "center_mm": list(self.center_xy),
            "sectors": {k: self.sectors.get(k) for k in SECTORS},
            "n_cells": {k: int(self.n_cells.get(k, 0)) for k in SECTORS},
            "cs_excluded": self.cs_excluded,
        }
        if self.subject_id is not None:
            d["subject_id"] = self.subject_id
        return d

    @classmethod
    def from_json(cls, d: dict) -> "EtdrsSummary":
        sectors = d.get("sectors")
        if not isinstance(sectors, dict) or set(sectors) != set(SECTORS):
            raise ValidationError(f"ETDRS summary must have exactly the sectors {SECTORS}")
        return cls(
            sectors={k: (None if sectors[k] is None else float(sectors[k])) for k in SECTORS},
            laterality=d["laterality"],
            aggregation=d["aggregation"],
            center_xy=tuple(d.get("center_mm", (3.0, 3.0))),
            layer=d.get("layer", ""),
            cs_excluded=bool(d.get("cs_excluded", False)),
            n_cells={k: int(v) for k, v in d.get("n_cells", {}).items()},
            subject_id=d.get("subject_id"),
        )


def sector_labels(shape, center_xy=(3.0, 3.0), laterality="OD", field_of_view_mm=(6.0, 6.0)) -> np.ndarray:
    """Sector index (0-8 in ``SECTORS`` order) of every map cell, -1 outside the grid.

    Geometry is evaluated in cell units so that left-right mirroring about
    the field centre is exact.  Cells on a diagonal belong to the superior
    or inferior quadrant.
    """
    if laterality not in ("OD", "OS"):
        raise ValidationError(f"laterality must be OD or OS, got {laterality!r}")
    ny, nx = shape
    fy, fx = field_of_view_mm
    cx_mm, cy_mm = center_xy
    if not (0.0 <= cx_mm <= fx and 0.0 <= cy_mm <= fy):
        raise CenterOutOfField(f"centre {center_xy} mm outside the {fx} x {fy} mm field")
    sx, sy = nx / fx, ny / fy  # cells per mm
    if not math.isclose(sx, sy, rel_tol=1e-12):
        raise ValidationError("anisotropic en-face cells are not supported for ETDRS sectoring")
    dx = (np.arange(nx) + 0.5) - cx_mm * sx
    dy_up = cy_mm * sy - (np.arange(ny) + 0.5)
    dx, dy_up = np.meshgrid(dx, dy_up)
    r2 = dx * dx + dy_up * dy_up
    r_c, r_i, r_o = ((r * sx) ** 2 for r in ETDRS_RADII_MM)

    superior = (dy_up >= np.abs(dx)) & (dy_up > 0)
    inferior = (-dy_up >= np.abs(dx)) & (dy_up < 0)
    left = ~superior & ~inferior & (dx < 0)
    right = ~superior & ~inferior & (dx > 0)
    nasal, temporal = (left, right) if laterality == "OD" else (right, left)

    out = np.full(shape, -1, dtype=np.int8)
    inner = (r2 > r_c) & (r2 <= r_i)
    outer = (r2 > r_i) & (r2 <= r_o)
    out[r2 <= r_c] = 0
    for ring, offset in ((inner, 1), (outer, 5)):
        out[ring & superior] = offset + 0
        out[ring & nasal] = offset + 1
        out[ring & inferior] = offset + 2
        out[ring & temporal] = offset + 3
    return out


def etdrs_summarize(
    tmap: ThicknessMap,
    center_xy=(3.0, 3.0),
    laterality: Optional[str] = None,
    aggregation: Optional[str] = None,
    subject_id: Optional[str] = None,
) -> EtdrsSummary:
    """Aggregate a map over the nine ETDRS sectors.

    Mean aggregation (layers) flags the central subfield as excluded; sum
    aggregation (pathologies) keeps it.  Sectors without valid cells are
    ``None``.  Sums use ``math.fsum`` so the result does not depend on cell
    order.
    """
    laterality = laterality or tmap.laterality
    aggregation = aggregation or tmap.semantics
    if aggregation not in ("mean", "sum"):
        raise ValidationError(f"aggregation must be 'mean' or 'sum', got {aggregation!r}")
    lab = sector_labels(tmap.values.shape, center_xy, laterality, tmap.field_of_view_mm)
    vals = tmap.values
    valid = ~np.isnan(vals)
    sectors, counts = {}, {}
    for k, name in enumerate(SECTORS):
        sel = vals[(lab == k) & valid]
        counts[name] = int(sel.size)
        if sel.size == 0:
            sectors[name] = None
        elif aggregation == "sum":
            sectors[name] = math.fsum(sel)
        else:
            sectors[name] = math.fsum(sel) / sel.size
    return EtdrsSummary(
        sectors=sectors,
        laterality=laterality,
        aggregation=aggregation,
        center_xy=(float(center_xy[0]), float(center_xy[1])),
        layer=tmap.name,
        cs_excluded=aggregation == "mean",
        n_cells=counts,
        subject_id=subject_id,
    )


def layer_names(which: str = "all") -> list[str]:
    """Names for ``--layer``: one class name, or ``all`` (bounded layers + pathologies)."""
    if which.lower() == "all":
        return [LABELS[i].name for i in BOUNDED_LAYERS + PATHOLOGIES]
    return [label(which).name]
