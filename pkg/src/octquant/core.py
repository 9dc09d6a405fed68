"""Domain types shared by every module.

Arrays are stored with axis order ``(B, Z, X)``: B-scan index (slow axis),
axial depth, and A-scan (fast lateral axis).  All containers are frozen and
their arrays are marked read-only so they can be shared between workers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import (
    DimMismatch,
    LateralityMismatch,
    SpacingMismatch,
    UnknownClass,
    ValidationError,
)

LATERALITIES = ("OD", "OS")
MIN_DIMS = (1, 16, 16)


# -- label schema -------------------------------------------------------------

class LabelClass(NamedTuple):
    id: int
    name: str
    is_layer: bool
    is_pathology: bool
    bounded: bool


LABELS = (
    LabelClass(0, "Vitreous", True, False, False),
    LabelClass(1, "RNFL", True, False, True),
    LabelClass(2, "GCL+IPL", True, False, True),
    LabelClass(3, "INL", True, False, True),
    LabelClass(4, "OPL", True, False, True),
    LabelClass(5, "ONL+IS", True, False, True),
    LabelClass(6, "EZ", True, False, True),
    LabelClass(7, "OS", True, False, True),
    LabelClass(8, "RPE", True, False, True),
    LabelClass(9, "Choroid", True, False, False),
    LabelClass(10, "Fluid", False, True, True),
    LabelClass(11, "HRF", False, True, True),
)
N_CLASSES = len(LABELS)

VITREOUS, RNFL, GCL_IPL, INL, OPL, ONL_IS, EZ, OS, RPE, CHOROID, FLUID, HRF = range(N_CLASSES)
BOUNDED_LAYERS = tuple(c.id for c in LABELS if c.is_layer and c.bounded)
PATHOLOGIES = tuple(c.id for c in LABELS if c.is_pathology)

_BY_NAME = {c.name.upper(): c for c in LABELS}


def label(key: int | str) -> LabelClass:
    """Look up a class by ID or (case-insensitive) name."""
    if isinstance(key, (int, np.integer)) and not isinstance(key, bool):
        if 0 <= int(key) < N_CLASSES:
            return LABELS[int(key)]
    elif isinstance(key, str):
        found = _BY_NAME.get(key.strip().upper())
        if found is not None:
            return found
        if key.strip().isdigit():
            return label(int(key))
    raise UnknownClass(f"unknown class {key!r}")


def class_id(key: int | str) -> int:
    return label(key).id


def class_name(key: int | str) -> str:
    return label(key).name


# -- spacing and containers ---------------------------------------------------

@dataclass(frozen=True)
class VoxelSpacing:
    """Physical voxel size in micrometres."""

    axial_um: float
    lateral_um: float
    bscan_um: float

    def __post_init__(self):
        for name in ("axial_um", "lateral_um", "bscan_um"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v <= 0:
                raise ValidationError(f"spacing.{name} must be positive and finite, got {v}")
            object.__setattr__(self, name, v)

    @property
    def voxel_volume_um3(self) -> float:
        return self.axial_um * self.lateral_um * self.bscan_um

    def as_list(self) -> list[float]:
        return [self.axial_um, self.lateral_um, self.bscan_um]

    def isclose(self, other: "VoxelSpacing", rtol: float = 1e-9) -> bool:
        return bool(np.allclose(self.as_list(), other.as_list(), rtol=rtol, atol=0.0))


def _check_laterality(laterality: str) -> str:
    if laterality not in LATERALITIES:
        raise ValidationError(f"laterality must be one of {LATERALITIES}, got {laterality!r}")
    return laterality


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Volume3D:
    """OCT intensity volume.

    ``voxels`` is float32 with shape ``(B, Z, X)``.  Integer sources are
    rescaled into [0, 1] when read; ``source_dtype`` remembers the on-disk
    sample type so a write reproduces the original bytes.
    """

    voxels: np.ndarray
    spacing: VoxelSpacing
    laterality: str = "OD"
    field_of_view_mm: tuple[float, float] = (6.0, 6.0)
    source_dtype: str = "f32"

    def __post_init__(self):
        vox = np.array(self.voxels, dtype=np.float32, copy=True)
        if vox.ndim != 3:
            raise DimMismatch(f"volume must be 3-D (B, Z, X), got shape {vox.shape}")
        if any(d < m for d, m in zip(vox.shape, MIN_DIMS)):
            raise DimMismatch(f"volume dims {vox.shape} below minimum {MIN_DIMS}")
        if not np.all(np.isfinite(vox)):
            raise ValidationError("volume contains non-finite intensities")
        if self.source_dtype not in ("u8", "u16", "f32"):
            raise ValidationError(f"unsupported dtype {self.source_dtype!r}")
        _check_laterality(self.laterality)
        object.__setattr__(self, "voxels", _frozen(vox))
        object.__setattr__(self, "field_of_view_mm", tuple(float(v) for v in self.field_of_view_mm))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def replace(self, voxels: np.ndarray) -> "Volume3D":
        return Volume3D(voxels, self.spacing, self.laterality, self.field_of_view_mm, self.source_dtype)

    def __eq__(self, other):
        if not isinstance(other, Volume3D):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.laterality == other.laterality
            and self.field_of_view_mm == other.field_of_view_mm
            and self.source_dtype == other.source_dtype
            and np.array_equal(self.voxels, other.voxels)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class LabelMask:
    """Voxel-wise class IDs (uint8, values 0-11) with shape ``(B, Z, X)``."""

    labels: np.ndarray
    spacing: VoxelSpacing
    laterality: str = "OD"
    field_of_view_mm: tuple[float, float] = (6.0, 6.0)

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 3:
            raise DimMismatch(f"mask must be 3-D (B, Z, X), got shape {lab.shape}")
        if lab.size and (lab.min() < 0 or lab.max() >= N_CLASSES):
            raise ValidationError(f"mask values must lie in [0, {N_CLASSES - 1}]")
        _check_laterality(self.laterality)
        object.__setattr__(self, "labels", _frozen(np.array(lab, dtype=np.uint8, copy=True)))
        object.__setattr__(self, "field_of_view_mm", tuple(float(v) for v in self.field_of_view_mm))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape

    def replace(self, labels: np.ndarray) -> "LabelMask":
        return LabelMask(labels, self.spacing, self.laterality, self.field_of_view_mm)

    def __eq__(self, other):
        if not isinstance(other, LabelMask):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.laterality == other.laterality
            and self.field_of_view_mm == other.field_of_view_mm
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None


@dataclass(frozen=True)
class StudyRecord:
    subject_id: str
    group: int  # 0 = NPDR, 1 = PDR
    age: float
    gender: int  # 0 = female, 1 = male
    diabetes_duration: float
    visual_acuity: float  # logMAR

    def __post_init__(self):
        if self.group not in (0, 1):
            raise ValidationError(f"{self.subject_id}: group must be 0 (NPDR) or 1 (PDR)")
        if self.gender not in (0, 1):
            raise ValidationError(f"{self.subject_id}: gender must be 0 (female) or 1 (male)")
        if not (self.age >= 0 and self.diabetes_duration >= 0):
            raise ValidationError(f"{self.subject_id}: age and duration must be non-negative")


class ValidatedPair(NamedTuple):
    gt: LabelMask
    pred: LabelMask


def validate_pair(gt: LabelMask, pred: LabelMask) -> ValidatedPair:
    """Check that two masks describe the same grid before comparing them."""
    if gt.dims != pred.dims:
        raise DimMismatch(f"dims: gt {gt.dims} vs pred {pred.dims}")
    if not gt.spacing.isclose(pred.spacing):
        raise SpacingMismatch(f"spacing: gt {gt.spacing.as_list()} vs pred {pred.spacing.as_list()}")
    if gt.laterality != pred.laterality:
        raise LateralityMismatch(f"laterality: gt {gt.laterality} vs pred {pred.laterality}")
    return ValidatedPair(gt, pred)


def class_volume_um3(mask: LabelMask, class_key: int | str) -> float:
    """Physical volume occupied by one class, in cubic micrometres."""
    cid = class_id(class_key)
    count = int(np.count_nonzero(mask.labels == cid))
    return count * mask.spacing.voxel_volume_um3


def class_counts(mask: LabelMask) -> np.ndarray:
    return np.bincount(mask.labels.ravel(), minlength=N_CLASSES).astype(np.int64)

