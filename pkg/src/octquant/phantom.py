"""Synthetic OCT volumes with exactly known ground truth.

The retina is an analytic scene: nine boundaries (ILM plus the bottom of
each bounded layer) are smooth sinusoids over the en-face plane, fluid
pockets are ellipsoids and HRF are small spheres.  Every B-scan pixel is
rendered by sampling that scene, so injected motion (axial/lateral shift and
in-plane rotation) is applied to the scene coordinates rather than by
resampling an image, and volume and mask move together exactly.

Pixel ``(b, r, c)`` sits at physical ``y = b * bscan_um``,
``z = (r + 0.5) * axial_um`` and ``x = c * lateral_um``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .core import (
    BOUNDED_LAYERS,
    CHOROID,
    FLUID,
    HRF,
    LABELS,
    N_CLASSES,
    LabelMask,
    Volume3D,
    VoxelSpacing,
    class_counts,
    label,
)
from .errors import SpecInfeasible, UnknownMode, ValidationError
from .thickness import MAP_SHAPE, ThicknessMap, etdrs_summarize, resample_map

# nominal thickness (um) per bounded layer, roughly macular values
DEFAULT_THICKNESS_UM = {
    "RNFL": 40.0, "GCL+IPL": 72.0, "INL": 36.0, "OPL": 28.0,
    "ONL+IS": 80.0, "EZ": 12.0, "OS": 24.0, "RPE": 20.0,
}

# per-class base reflectivity
BASE_INTENSITY = np.array(
    [0.05, 0.80, 0.55, 0.35, 0.62, 0.25, 0.88, 0.45, 0.92, 0.50, 0.02, 0.97]
)


@dataclass
class LayerSpec:
    thickness_um: float
    amplitude_um: float = 0.0
    wavelength_um: float = 3000.0
    phase: float = 0.0


def default_layers(undulation: float = 0.3) -> dict:
    """Default layer stack; each boundary undulates by ``undulation`` x thickness.

    Distinct wavelengths and phases give every B-scan lateral texture, which
    registration needs.
    """
    return {
        name: LayerSpec(t, undulation * t, 1500.0 + 300.0 * i, float(i))
        for i, (name, t) in enumerate(DEFAULT_THICKNESS_UM.items())
    }


@dataclass
class Ellipsoid:
    center_um: tuple  # (y, z, x)
    semi_axes_um: tuple  # (ry, rz, rx)
    host: str = "ONL+IS"


@dataclass
class HrfSpec:
    count: int = 0
    radius_um: tuple = (15.0, 30.0)
    layers: tuple = ("INL", "ONL+IS")


@dataclass
class MotionSpec:
    axial_px: Optional[list] = None
    lateral_px: Optional[list] = None
    rotation_deg: Optional[list] = None

    def arrays(self, n_b: int):
        def arr(v):
            a = np.zeros(n_b) if v is None else np.asarray(v, dtype=np.float64)
            if a.shape != (n_b,):
                raise ValidationError(f"motion arrays must have length B={n_b}")
            return a

        return arr(self.axial_px), arr(self.lateral_px), arr(self.rotation_deg)


@dataclass
class PhantomSpec:
    dims: tuple = (32, 256, 256)
    spacing_um: Optional[tuple] = None  # (axial, lateral, bscan); lateral/bscan default to FOV / dims
    laterality: str = "OD"
    field_of_view_mm: tuple = (6.0, 6.0)
    ilm_depth_um: Optional[float] = None
    ilm_amplitude_um: float = 30.0
    ilm_wavelength_um: float = 4000.0
    ilm_wavelength_y_um: Optional[float] = None
    layers: dict = field(default_factory=default_layers)
    fluids: list = field(default_factory=list)
    hrf: HrfSpec = field(default_factory=HrfSpec)
    noise: float = 0.15
    motion: MotionSpec = field(default_factory=MotionSpec)
    seed: int = 0

    def voxel_spacing(self) -> VoxelSpacing:
        n_b, n_z, n_x = self.dims
        if self.spacing_um is not None:
            return VoxelSpacing(*self.spacing_um)
        return VoxelSpacing(3.9, self.field_of_view_mm[1] * 1000.0 / n_x, self.field_of_view_mm[0] * 1000.0 / n_b)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "PhantomSpec":
        if not isinstance(d, dict):
            raise ValidationError("phantom spec must be a JSON object")
        d = dict(d)
        try:
            if "layers" in d:
                d["layers"] = {
                    k: LayerSpec(**v) if isinstance(v, dict) else LayerSpec(float(v))
                    for k, v in d["layers"].items()
                }
            if "fluids" in d:
                d["fluids"] = [Ellipsoid(**e) for e in d["fluids"]]
            if "hrf" in d:
                d["hrf"] = HrfSpec(**d["hrf"])
            if "motion" in d:
                d["motion"] = MotionSpec(**d["motion"])
            for k in ("dims", "spacing_um", "field_of_view_mm"):
                if d.get(k) is not None:
                    d[k] = tuple(d[k])
            return cls(**d)
        except (TypeError, ValueError, AttributeError) as exc:
            raise ValidationError(f"malformed phantom spec: {exc}") from exc


@dataclass
class GroundTruthTables:
    thickness_um: dict  # layer name -> (B, X) analytic thickness grid
    etdrs_means: dict  # layer name -> sector -> mean thickness (um)
    class_volumes_um3: dict  # class name -> um^3
    motion: dict  # axial_px / lateral_px / rotation_deg lists

    def to_json(self) -> dict:
        return {
            "thickness_um": {
                k: {"mean": float(v.mean()), "min": float(v.min()), "max": float(v.max())}
                for k, v in self.thickness_um.items()
            },
            "etdrs_means": self.etdrs_means,
            "class_volumes_um3": self.class_volumes_um3,
            "motion": self.motion,
        }


# -- scene --------------------------------------------------------------------

def _layer_order(spec: PhantomSpec) -> list[LayerSpec]:
    out = []
    for lid in BOUNDED_LAYERS:
        name = LABELS[lid].name
        if name not in spec.layers:
            raise SpecInfeasible(f"phantom spec is missing layer {name}")
        ls = spec.layers[name]
        if not (ls.thickness_um > 0 and abs(ls.amplitude_um) < ls.thickness_um):
            raise SpecInfeasible(f"{name}: thickness must be positive and exceed its undulation amplitude")
        out.append(ls)
    return out


def _ilm_depth(spec: PhantomSpec, sp: VoxelSpacing) -> float:
    if spec.ilm_depth_um is not None:
        return float(spec.ilm_depth_um)
    return math.floor(spec.dims[1] * 0.25) * sp.axial_um


def boundaries_at(spec: PhantomSpec, y_um, x_um) -> np.ndarray:
    """Depths (um) of the nine inner boundaries at en-face positions.

    Row 0 is the ILM, row ``k`` (1-8) the bottom of bounded layer ``k``.
    Output shape is ``(9,) + broadcast(y_um, x_um).shape``.
    """
    sp = spec.voxel_spacing()
    y, x = np.broadcast_arrays(np.asarray(y_um, dtype=np.float64), np.asarray(x_um, dtype=np.float64))
    ilm = np.full(y.shape, _ilm_depth(spec, sp))
    if spec.ilm_amplitude_um:
        arg = 2 * np.pi * x / spec.ilm_wavelength_um
        if spec.ilm_wavelength_y_um:
            arg = arg + 2 * np.pi * y / spec.ilm_wavelength_y_um
        ilm = ilm + spec.ilm_amplitude_um * np.sin(arg)
    out = [ilm]
    depth = ilm
    for ls in _layer_order(spec):
        t = ls.thickness_um
        if ls.amplitude_um:
            t = t + ls.amplitude_um * np.sin(2 * np.pi * x / ls.wavelength_um + ls.phase)
        depth = depth + t
        out.append(depth)
    return np.stack(out)


def _check_feasible(spec: PhantomSpec, sp: VoxelSpacing):
    n_b, n_z, n_x = spec.dims
    if n_b < 1 or n_z < 16 or n_x < 16:
        raise SpecInfeasible(f"dims {spec.dims} below minimum (1, 16, 16)")
    layers = _layer_order(spec)
    top = _ilm_depth(spec, sp) - abs(spec.ilm_amplitude_um)
    bottom = _ilm_depth(spec, sp) + abs(spec.ilm_amplitude_um) + sum(
        ls.thickness_um + abs(ls.amplitude_um) for ls in layers
    )
    if top < 0 or bottom > n_z * sp.axial_um:
        raise SpecInfeasible(
            f"layer stack spans {top:.1f}..{bottom:.1f} um but the volume depth is {n_z * sp.axial_um:.1f} um"
        )


def _rot(theta_deg: float):
    t = math.radians(theta_deg)
    return math.cos(t), math.sin(t)


def scene_coords(spec: PhantomSpec, axial_px: float, lateral_px: float, rotation_deg: float):
    """Scene sampling position (row, col) in pixels for every pixel of one B-scan.

    The observed B-scan is the scene rotated about the B-scan centre by
    ``rotation_deg`` (counter-clockwise as displayed) and then translated by
    ``(axial_px, lateral_px)``.
    """
    _, n_z, n_x = spec.dims
    rows, cols = np.meshgrid(np.arange(n_z, dtype=np.float64), np.arange(n_x, dtype=np.float64), indexing="ij")
    r0, c0 = (n_z - 1) / 2.0, (n_x - 1) / 2.0
    pr = rows - axial_px - r0
    pc = cols - lateral_px - c0
    if rotation_deg:
        c, s = _rot(rotation_deg)
        pr, pc = pr * c + pc * s, -pr * s + pc * c
    return pr + r0, pc + c0


def _render_bscan(spec, sp, b, rows, cols, ellipsoids, dots, rng):
    """Labels and noise-free intensities of one B-scan from scene coordinates."""
    y = b * sp.bscan_um
    z = (rows + 0.5) * sp.axial_um
    x = cols * sp.lateral_um
    bnd = boundaries_at(spec, y, x)  # (9, Z, X)

    lab = np.count_nonzero(bnd <= z[None], axis=0).astype(np.uint8)

    # partial-volume rendering along depth
    z0, z1 = z - sp.axial_um / 2, z + sp.axial_um / 2
    edges = np.concatenate([np.full((1,) + z.shape, -np.inf), bnd, np.full((1,) + z.shape, np.inf)])
    img = np.zeros(z.shape)
    for k in range(CHOROID + 1):
        lo, hi = edges[k], edges[k + 1]
        ov = np.clip(np.minimum(z1, hi) - np.maximum(z0, lo), 0.0, None)
        img += BASE_INTENSITY[k] * ov
    img /= sp.axial_um

    for e in ellipsoids:
        (cy, cz, cx), (ry, rz, rx) = e.center_um, e.semi_axes_um
        inside = ((y - cy) / ry) ** 2 + ((z - cz) / rz) ** 2 + ((x - cx) / rx) ** 2 <= 1.0
        carve = inside & (lab == label(e.host).id)
        lab[carve] = FLUID
    for cy, cz, cx, r in dots:
        inside = (y - cy) ** 2 + (z - cz) ** 2 + (x - cx) ** 2 <= r * r
        carve = inside & (lab >= 1) & (lab <= 8)
        lab[carve] = HRF
    for cls in (FLUID, HRF):
        img[lab == cls] = BASE_INTENSITY[cls]

    if spec.noise > 0:
        s = spec.noise
        img = img * np.exp(rng.normal(-0.5 * s * s, s, size=img.shape))
    return lab, np.clip(img, 0.0, 1.0)


def _place_hrf(spec: PhantomSpec, sp: VoxelSpacing, rng) -> list:
    h = spec.hrf
    if h.count <= 0:
        return []
    n_b, _, n_x = spec.dims
    first = BOUNDED_LAYERS.index(label(h.layers[0]).id)
    last = BOUNDED_LAYERS.index(label(h.layers[1]).id)
    dots = []
    for _ in range(h.count):
        cy = rng.uniform(0, (n_b - 1) * sp.bscan_um)
        cx = rng.uniform(0, (n_x - 1) * sp.lateral_um)
        bnd = boundaries_at(spec, cy, cx)
        cz = rng.uniform(bnd[first], bnd[last + 1])
        r = rng.uniform(*h.radius_um)
        dots.append((float(cy), float(cz), float(cx), float(r)))
    return dots


def generate(spec: PhantomSpec):
    """Render ``(Volume3D, LabelMask, GroundTruthTables)`` for a phantom spec."""
    sp = spec.voxel_spacing()
    _check_feasible(spec, sp)
    n_b, n_z, n_x = spec.dims
    ax, lat, rot = spec.motion.arrays(n_b)
    seeds = np.random.SeedSequence(spec.seed).spawn(n_b + 1)
    dots = _place_hrf(spec, sp, np.random.default_rng(seeds[0]))

    labels = np.empty((n_b, n_z, n_x), dtype=np.uint8)
    vox = np.empty((n_b, n_z, n_x), dtype=np.float64)
    for b in range(n_b):
        rows, cols = scene_coords(spec, ax[b], lat[b], rot[b])
        labels[b], vox[b] = _render_bscan(
            spec, sp, b, rows, cols, spec.fluids, dots, np.random.default_rng(seeds[b + 1])
        )

    volume = Volume3D(vox, sp, spec.laterality, spec.field_of_view_mm)
    mask = LabelMask(labels, sp, spec.laterality, spec.field_of_view_mm)
    return volume, mask, ground_truth(spec, mask)


def ground_truth(spec: PhantomSpec, mask: LabelMask) -> GroundTruthTables:
    sp = spec.voxel_spacing()
    n_b, _, n_x = spec.dims
    y = (np.arange(n_b) * sp.bscan_um)[:, None]
    x = (np.arange(n_x) * sp.lateral_um)[None, :]
    bnd = boundaries_at(spec, y, x)
    thick, etdrs = {}, {}
    for k, lid in enumerate(BOUNDED_LAYERS):
        name = LABELS[lid].name
        t = bnd[k + 1] - bnd[k]
        thick[name] = t
        tmap = ThicknessMap(resample_map(t, "mean", MAP_SHAPE), "mean", name, spec.laterality, spec.field_of_view_mm)
        etdrs[name] = etdrs_summarize(tmap).sectors
    counts = class_counts(mask)
    volumes = {LABELS[i].name: int(counts[i]) * sp.voxel_volume_um3 for i in range(N_CLASSES)}
    ax, lat, rot = spec.motion.arrays(n_b)
    motion = {"axial_px": ax.tolist(), "lateral_px": lat.tolist(), "rotation_deg": rot.tolist()}
    return GroundTruthTables(thick, etdrs, volumes, motion)


# -- controlled degradations --------------------------------------------------

PERTURB_MODES = ("dilate_class", "erode_class", "shift_boundary", "relabel_noise")
_CROSS = ndimage.generate_binary_structure(2, 1)[None]  # in-plane 4-connectivity


def perturb_mask(mask: LabelMask, mode: str, magnitude: float, seed: int = 0, class_key=None) -> LabelMask:
    """Degrade a mask in a known direction.

    ``dilate_class`` / ``erode_class`` grow or shrink ``class_key`` by
    ``magnitude`` pixels in every B-scan (eroded pixels take the nearest
    other label); ``shift_boundary`` moves every A-scan down by ``magnitude``
    pixels; ``relabel_noise`` reassigns a ``magnitude`` fraction of voxels to
    random classes.
    """
    if mode not in PERTURB_MODES:
        raise UnknownMode(f"unknown perturbation mode {mode!r}; expected one of {PERTURB_MODES}")
    lab = np.array(mask.labels)
    if magnitude == 0:
        return mask.replace(lab)
    if mode in ("dilate_class", "erode_class"):
        if class_key is None:
            raise ValidationError(f"{mode} needs a class")
        cid = label(class_key).id
        region = lab == cid
        n = int(round(magnitude))
        if mode == "dilate_class":
            grown = ndimage.binary_dilation(region, structure=_CROSS, iterations=n)
            lab[grown] = cid
        else:
            shrunk = ndimage.binary_erosion(region, structure=_CROSS, iterations=n, border_value=1)
            lost = region & ~shrunk
            for b in range(lab.shape[0]):
                if lost[b].any():
                    others = ~region[b]
                    if not others.any():
                        continue
                    _, (ri, ci) = ndimage.distance_transform_edt(~others, return_indices=True)
                    lab[b][lost[b]] = lab[b][ri[lost[b]], ci[lost[b]]]
    elif mode == "shift_boundary":
        n = int(round(magnitude))
        shifted = np.empty_like(lab)
        if n > 0:
            shifted[:, n:] = lab[:, :-n]
            shifted[:, :n] = lab[:, :1]
        else:
            shifted[:, :n] = lab[:, -n:]
            shifted[:, n:] = lab[:, -1:]
        lab = shifted
    else:
        rng = np.random.default_rng(seed)
        hit = rng.random(lab.shape) < float(magnitude)
        lab[hit] = rng.integers(0, N_CLASSES, size=int(hit.sum()), dtype=np.uint8)
    return mask.replace(lab)
