"""Volume preprocessing: axial centring, TV smoothing, motion correction.

Shifts in a :class:`MotionEstimate` are *corrections*: the amount each
B-scan has to be moved to line up with the reference.  A B-scan displaced
downward by 7 px therefore gets ``axial_shift_px = -7``.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core import Volume3D
from .errors import DegenerateBScan, ValidationError

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 5
# subpixel estimates are snapped to this grid; see phase_correlate
SUBPIXEL_RESOLUTION = 0.1
# peak z-score below which a correlation surface counts as flat
MIN_PEAK_SCORE = 7.0


def _workers(workers):
    if workers is None:
        workers = int(os.environ.get("OCT_QUANT_THREADS", "1") or 1)
    return max(1, int(workers))


def _map(fn, items, workers):
    workers = _workers(workers)
    if workers == 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _shift_rows(img: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros_like(img)
    if n > 0:
        out[n:] = img[:-n]
    elif n < 0:
        out[:n] = img[-n:]
    else:
        out[:] = img
    return out


# -- axial centring -----------------------------------------------------------

def axial_center(volume: Volume3D, percentile: float = 20.0):
    """Move each B-scan so its retina sits at mid-depth.

    The retinal centre of a B-scan is the mean row index of the pixels whose
    intensity exceeds the B-scan's ``percentile``-th percentile.  B-scans are
    rolled by an integer number of rows, zero-filling what enters.

    Returns the centred volume and the integer offsets (positive = moved
    down).
    """
    n_b, n_z, _ = volume.dims
    if n_z < 16:
        raise ValidationError(f"axial_center needs Z >= 16, got {n_z}")
    vox = volume.voxels
    out = np.empty_like(vox)
    offsets = np.zeros(n_b, dtype=np.int64)
    rows = np.arange(n_z, dtype=np.float64)[:, None]
    for b in range(n_b):
        img = vox[b]
        thr = np.percentile(img, percentile)
        bright = img > thr
        if not bright.any():
            raise DegenerateBScan(f"B-scan {b}: no pixel above the {percentile:g}th percentile")
        centre = np.broadcast_to(rows, img.shape)[bright].mean()
        offsets[b] = int(math.floor(n_z / 2 - centre + 0.5))
        out[b] = _shift_rows(img, int(offsets[b]))
    return volume.replace(out), offsets


# -- bounded-variation smoothing ----------------------------------------------

@dataclass(frozen=True)
class BvParams:
    weight: float = 0.08
    max_iters: int = 100
    tol: float = 1e-4

    def __post_init__(self):
        if not self.weight >= 0:
            raise ValidationError("BV weight must be >= 0")
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        if not self.tol > 0:
            raise ValidationError("tol must be > 0")


def _grad(u):
    g = np.zeros((u.ndim,) + u.shape)
    for ax in range(u.ndim):
        sl = [slice(None)] * u.ndim
        sl[ax] = slice(0, -1)
        g[ax][tuple(sl)] = np.diff(u, axis=ax)
    return g


def _div(p):
    """Negative adjoint of the forward-difference gradient (Neumann boundary)."""
    d = np.zeros(p.shape[1:])
    for ax in range(p.shape[0]):
        pa = p[ax]
        n = pa.shape[ax]
        sl = lambda a, b: tuple(slice(a, b) if i == ax else slice(None) for i in range(pa.ndim))
        d[sl(0, 1)] += pa[sl(0, 1)]
        if n > 2:
            d[sl(1, n - 1)] += pa[sl(1, n - 1)] - pa[sl(0, n - 2)]
        if n > 1:
            d[sl(n - 1, n)] -= pa[sl(n - 2, n - 1)]
    return d


def total_variation(u: np.ndarray) -> float:
    """Isotropic discrete total variation (forward differences)."""
    g = _grad(np.asarray(u, dtype=np.float64))
    return float(np.sqrt((g * g).sum(axis=0)).sum())


def tv_denoise(f: np.ndarray, weight: float, max_iters: int = 100, tol: float = 1e-4):
    """ROF denoising, min_u 1/2 ||u - f||^2 + weight * TV(u), by dual projection.

    Returns ``(u, iterations)``.  Works on arrays of any dimension; the grid
    is treated as isotropic.
    """
    f = np.asarray(f, dtype=np.float64)
    if weight == 0:
        return f.copy(), 0
    step = 1.0 / (4.0 * f.ndim)
    p = np.zeros((f.ndim,) + f.shape)
    u = f.copy()
    it = 0
    for it in range(1, max_iters + 1):
        g = _grad(_div(p) - f / weight)
        norm = np.sqrt((g * g).sum(axis=0))
        p = (p + step * g) / (1.0 + step * norm)
        u_new = f - weight * _div(p)
        change = np.linalg.norm(u_new - u) / max(np.linalg.norm(u_new), 1e-12)
        u = u_new
        if change < tol:
            break
    return u, it


def bv_smooth(volume: Volume3D, params: BvParams = BvParams()) -> Volume3D:
    """3-D bounded-variation smoothing; output is clipped to [0, 1]."""
    if params.weight == 0:
        return volume
    u, _ = tv_denoise(volume.voxels, params.weight, params.max_iters, params.tol)
    return volume.replace(np.clip(u, 0.0, 1.0))


# -- registration primitives --------------------------------------------------

def _parabolic(cm1: float, c0: float, cp1: float) -> float:
    denom = cm1 - 2.0 * c0 + cp1
    if denom >= 0:
        return 0.0
    off = 0.5 * (cm1 - cp1) / denom
    return float(np.clip(off, -0.5, 0.5))


def _pc_surface(ref, img, axes):
    fr = np.fft.fftn(ref - ref.mean(), axes=axes)
    fi = np.fft.fftn(img - img.mean(), axes=axes)
    cross = fi * np.conj(fr)
    mag = np.abs(cross)
    if not np.any(mag > 0):
        return None
    cross = np.where(mag > 1e-12 * mag.max(), cross / np.maximum(mag, 1e-300), 0)
    surf = np.real(np.fft.ifftn(cross, axes=axes))
    # uncorrelated axes (e.g. radius in a polar image) vote for the same shift
    other = tuple(i for i in range(surf.ndim) if i not in axes)
    return surf.sum(axis=other) if other else surf


def _peak(surf, axes):
    """Integer peak plus per-axis parabolic offsets (``surf`` spans only ``axes``)."""
    axes = range(surf.ndim)
    peak = np.unravel_index(int(np.argmax(surf)), surf.shape)
    sd = surf.std()
    score = float((surf[peak] - surf.mean()) / sd) if sd > 0 else 0.0
    shift = np.zeros(len(axes))
    for i, ax in enumerate(axes):
        n = surf.shape[ax]
        idx = list(peak)
        idx[ax] = (peak[ax] - 1) % n
        cm1 = surf[tuple(idx)]
        idx[ax] = (peak[ax] + 1) % n
        cp1 = surf[tuple(idx)]
        s = peak[ax] + (_parabolic(cm1, surf[peak], cp1) if n >= 3 else 0.0)
        shift[i] = s - n if s > n / 2 else s
    return shift, score


def _fourier_translate(img, shift, axes):
    f = np.fft.fftn(img, axes=axes)
    for s, ax in zip(shift, axes):
        k = np.fft.fftfreq(img.shape[ax])
        shape = [1] * img.ndim
        shape[ax] = -1
        f = f * np.exp(-2j * np.pi * k * s).reshape(shape)
    return np.real(np.fft.ifftn(f, axes=axes))


def phase_correlate(ref, img, axes=(0, 1), window=True, resolution=SUBPIXEL_RESOLUTION):
    """Translation of ``img`` relative to ``ref`` by phase correlation.

    Returns ``(shift, score)`` with ``img(p) ~ ref(p - shift)`` along
    ``axes``.  The correlation peak is located to subpixel precision with a
    three-point parabola; when that lands visibly off the integer grid the
    fractional part is removed by a Fourier shift and the residual is fitted
    again, which cancels most of the parabola's bias.  The result is snapped
    to ``resolution`` pixels, so motion-free and integer-shifted pairs come
    out exactly.  ``score`` is the peak height in standard deviations of the
    correlation surface; a low score means the surface is flat.

    ``window`` applies a Hann taper along the correlated axes (use it for
    non-periodic data).
    """
    ref = np.asarray(ref, dtype=np.float64)
    img = np.asarray(img, dtype=np.float64)
    axes = tuple(axes)
    taper = 1.0
    if window:
        taper = np.ones(ref.shape)
        for ax in axes:
            shape = [1] * ref.ndim
            shape[ax] = -1
            taper = taper * np.hanning(ref.shape[ax]).reshape(shape)
    surf = _pc_surface(ref * taper, img * taper, axes)
    if surf is None:
        return np.zeros(len(axes)), 0.0
    shift, score = _peak(surf, axes)
    frac = shift - np.round(shift)
    if resolution and np.any(np.abs(frac) >= resolution / 2):
        moved = _fourier_translate(img, -frac, axes)
        surf2 = _pc_surface(ref * taper, moved * taper, axes)
        if surf2 is not None:
            resid, _ = _peak(surf2, axes)
            if np.all(np.abs(resid) <= 0.5):
                shift = np.round(shift) + frac + resid
    if resolution:
        shift = np.round(shift / resolution) * resolution
    shift[np.abs(shift) < 1e-9] = 0.0
    return shift, score


def _rotate(img: np.ndarray, theta_deg: float) -> np.ndarray:
    """Rotate about the image centre, counter-clockwise as displayed (row axis down)."""
    n_z, n_x = img.shape
    r0, c0 = (n_z - 1) / 2.0, (n_x - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(n_z) - r0, np.arange(n_x) - c0, indexing="ij")
    t = math.radians(theta_deg)
    c, s = math.cos(t), math.sin(t)
    src_r = rows * c + cols * s + r0
    src_c = -rows * s + cols * c + c0
    return ndimage.map_coordinates(img, [src_r, src_c], order=1, mode="constant", cval=0.0)


def _translate(img: np.ndarray, d_row: float, d_col: float) -> np.ndarray:
    if d_row == 0 and d_col == 0:
        return img
    if float(d_row).is_integer() and float(d_col).is_integer():
        out = _shift_rows(img, int(d_row))
        return _shift_rows(out.T, int(d_col)).T
    return ndimage.shift(img, (d_row, d_col), order=1, mode="constant", cval=0.0)


def polar_resample(img: np.ndarray, n_angles: int = 720, n_radii=None, max_radius=None) -> np.ndarray:
    """Linear-radius polar image ``(n_radii, n_angles)`` about the image centre.

    Angle ``k`` is ``360 * k / n_angles`` degrees, counter-clockwise as
    displayed, so an image rotation is a circular shift along axis 1.
    """
    n_z, n_x = img.shape
    r0, c0 = (n_z - 1) / 2.0, (n_x - 1) / 2.0
    if max_radius is None:
        max_radius = min(n_z, n_x) / 2.0 - 1.0
    if n_radii is None:
        n_radii = max(int(max_radius), 2)
    radii = np.linspace(1.0, max_radius, n_radii)
    ang = np.deg2rad(np.arange(n_angles) * 360.0 / n_angles)
    rr, aa = np.meshgrid(radii, ang, indexing="ij")
    src_r = r0 - rr * np.sin(aa)
    src_c = c0 + rr * np.cos(aa)
    return ndimage.map_coordinates(img, [src_r, src_c], order=1, mode="constant", cval=0.0)


# -- motion correction --------------------------------------------------------

@dataclass
class MotionEstimate:
    axial_shift_px: np.ndarray
    lateral_shift_px: np.ndarray
    rotation_deg: np.ndarray
    reference_window: int = DEFAULT_WINDOW
    flat_spectrum: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.axial_shift_px)
        if self.flat_spectrum is None:
            self.flat_spectrum = np.zeros(n, dtype=bool)
        for name in ("axial_shift_px", "lateral_shift_px", "rotation_deg", "flat_spectrum"):
            if len(getattr(self, name)) != n:
                raise ValidationError("motion estimate arrays must share one length")

    def to_json(self) -> dict:
        return {
            "axial_shift_px": [float(v) + 0.0 for v in self.axial_shift_px],
            "lateral_shift_px": [float(v) + 0.0 for v in self.lateral_shift_px],
            "rotation_deg": [float(v) + 0.0 for v in self.rotation_deg],
            "reference_window": int(self.reference_window),
            "flat_spectrum": [bool(v) for v in self.flat_spectrum],
        }


def central_reference(vox: np.ndarray, window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Mean of the B-scans within ``window`` of the central one."""
    lo, hi = _window_bounds(vox.shape[0], window)
    return vox[lo:hi].astype(np.float64).mean(axis=0)


def _window_bounds(n_b, window):
    c = n_b // 2
    return max(0, c - window), min(n_b, c + window + 1)


def _references(vox, window):
    """Per-B-scan reference: the central mean, leaving the scan itself out.

    A whitened cross-power spectrum locks onto an exact copy of the moving
    image, so a scan inside the window must not see itself in its reference.
    """
    lo, hi = _window_bounds(vox.shape[0], window)
    total = vox[lo:hi].astype(np.float64).sum(axis=0)
    n = hi - lo
    mean = total / n

    def ref(b):
        if lo <= b < hi and n > 1:
            return (total - vox[b]) / (n - 1)
        return mean

    return ref


def estimate_axial(vox, window=DEFAULT_WINDOW, workers=None):
    ref = _references(vox, window)

    def one(b):
        s, score = phase_correlate(ref(b), vox[b])
        return s[0], score

    res = _map(one, range(vox.shape[0]), workers)
    shifts = np.array([r[0] for r in res])
    flat = np.array([not (r[1] >= MIN_PEAK_SCORE) for r in res])
    return -shifts, flat


def estimate_lateral(vox, workers=None):
    """Lateral corrections from phase correlation of adjacent B-scans.

    Adjacent displacements are accumulated into positions and re-centred on
    their median, so the motion-free majority defines zero.
    """
    n_b = vox.shape[0]

    def one(b):
        s, score = phase_correlate(vox[b - 1], vox[b])
        return s[1], score

    res = _map(one, range(1, n_b), workers)
    steps = np.array([0.0] + [r[0] for r in res])
    flat = np.array([False] + [not (r[1] >= MIN_PEAK_SCORE) for r in res])
    steps[flat] = 0.0
    pos = np.cumsum(steps)
    pos = pos - np.median(pos)
    pos = np.round(pos / SUBPIXEL_RESOLUTION) * SUBPIXEL_RESOLUTION
    pos[np.abs(pos) < 1e-9] = 0.0
    return -pos, flat


def estimate_rotation(vox, window=DEFAULT_WINDOW, n_angles=720, workers=None):
    ref = _references(vox, window)
    max_r = min(vox.shape[1:]) / 2.0 - 1.0
    lo, hi = _window_bounds(vox.shape[0], window)
    polar = {}

    def pref(b):
        key = b if lo <= b < hi else -1
        if key not in polar:
            polar[key] = polar_resample(ref(b), n_angles, max_radius=max_r)
        return polar[key]

    def one(b):
        pim = polar_resample(vox[b], n_angles, max_radius=max_r)
        s, score = phase_correlate(pref(b), pim, axes=(1,), window=False)
        return s[0] * 360.0 / n_angles, score

    res = _map(one, range(vox.shape[0]), workers)
    rot = np.array([r[0] for r in res])
    flat = np.array([not (r[1] >= MIN_PEAK_SCORE) for r in res])
    bad = flat | (np.abs(rot) >= 45.0)
    rot[bad] = 0.0
    return -rot, bad


def _snap(v):
    v = np.round(np.asarray(v, dtype=np.float64) / SUBPIXEL_RESOLUTION) * SUBPIXEL_RESOLUTION
    v[np.abs(v) < 1e-9] = 0.0
    return v


def _apply(vox, axial, lateral, rot):
    """Translate then rotate every B-scan (one interpolation per step)."""
    out = []
    for b in range(vox.shape[0]):
        img = _translate(vox[b], axial[b], lateral[b])
        out.append(_rotate(img, rot[b]) if rot[b] else img)
    return np.stack(out)


def _estimate_pass(vox, window, correct_rotation, workers):
    n_b = vox.shape[0]
    axial, flat_a = estimate_axial(vox, window, workers)
    axial[flat_a] = 0.0
    vox = np.stack([_translate(vox[b], axial[b], 0.0) for b in range(n_b)])
    lateral, flat_l = estimate_lateral(vox, workers)
    if correct_rotation:
        vox = np.stack([_translate(vox[b], 0.0, lateral[b]) for b in range(n_b)])
        rot, flat_r = estimate_rotation(vox, window, workers=workers)
    else:
        rot, flat_r = np.zeros(n_b), np.zeros(n_b, dtype=bool)
    return axial, lateral, rot, flat_a | flat_l | flat_r


def motion_correct(
    volume: Volume3D,
    window: int = DEFAULT_WINDOW,
    correct_rotation: bool = True,
    workers=None,
):
    """Estimate and undo inter-B-scan motion.

    Axial shifts come from phase correlation of each B-scan against the
    moving average of the central B-scans, lateral shifts from adjacent
    B-scans, and rotations from phase correlation along the angle axis of
    polar resamplings against the same moving average (recomputed after the
    translations are applied).  Corrections are applied in that order with
    bilinear interpolation and zero fill.  B-scans whose correlation surface
    is flat keep a zero shift and are flagged.

    Rotating about the B-scan centre also moves a retina that sits off
    centre, which the translation estimates pick up.  When rotations are
    found, the estimation is repeated once on the corrected volume and the
    two corrections are composed into a single translate-then-rotate per
    B-scan, applied to the original data.
    """
    n_b = volume.dims[0]
    if n_b < 3:
        raise ValidationError(f"motion correction needs at least 3 B-scans, got {n_b}")
    vox = np.array(volume.voxels, dtype=np.float64)

    axial, lateral, rot, flat = _estimate_pass(vox, window, correct_rotation, workers)
    if rot.any():
        a2, l2, r2, flat2 = _estimate_pass(_apply(vox, axial, lateral, rot), window, True, workers)
        # R(t2) T(d2) R(t1) T(d1) = R(t1 + t2) T(d1 + M(t1) d2), M(t) = [[c, s], [-s, c]]
        t = np.deg2rad(rot)
        c, s = np.cos(t), np.sin(t)
        axial = _snap(axial + c * a2 + s * l2)
        lateral = _snap(lateral - s * a2 + c * l2)
        rot = _snap(rot + r2)
        flat = flat | flat2

    if flat.any():
        log.warning("flat correlation spectrum for B-scans %s; left uncorrected", np.nonzero(flat)[0].tolist())
    est = MotionEstimate(axial, lateral, rot, window, flat)
    if not (axial.any() or lateral.any() or rot.any()):
        return volume, est
    return volume.replace(np.clip(_apply(vox, axial, lateral, rot), 0.0, 1.0)), est
