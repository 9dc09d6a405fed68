import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octquant import thickness as th
from octquant.core import VoxelSpacing, class_volume_um3
from octquant.errors import CenterOutOfField, EmptySurface, UnboundedLayer, ValidationError
from octquant.thickness import SECTORS, ThicknessMap

from conftest import make_mask
import oracles


def _slab(top=10, bottom=19, shape=(3, 40, 8), cls=1):
    lab = np.zeros(shape, dtype=np.uint8)
    lab[:, top:bottom + 1] = cls
    lab[:, bottom + 1:] = 9
    return lab


def test_constant_slab_surfaces():
    m = make_mask(_slab(), VoxelSpacing(5.0, 10.0, 20.0))
    up, lo = th.extract_surfaces(m, "RNFL")
    assert len(up) == len(lo) == 3 * 8
    assert np.all(up.points[:, 1] == 10 * 5.0)
    # voxel-face convention: the lower surface is the bottom face of row 19
    assert np.all(lo.points[:, 1] == 20 * 5.0)
    assert np.all(th.knn_thickness(up, lo) == 50.0)


def test_absent_columns_missing():
    lab = _slab()
    lab[1, :, 3] = 0
    m = make_mask(lab)
    up, lo = th.extract_surfaces(m, 1)
    assert len(up) == 3 * 8 - 1
    t = th.knn_thickness(up, lo)
    assert np.isnan(t[1, 3]) and np.isfinite(t).sum() == 23


def test_unbounded_and_non_layers_rejected():
    m = make_mask(_slab())
    for key in ("Vitreous", "Choroid"):
        with pytest.raises(UnboundedLayer):
            th.extract_surfaces(m, key)
    with pytest.raises(ValidationError):
        th.extract_surfaces(m, "Fluid")


def test_single_point_surfaces():
    sp = VoxelSpacing(1.0, 1.0, 1.0)
    up = th.LayerSurface(np.array([[0, 0]]), np.array([[0.0, 0.0, 0.0]]), (1, 1), sp)
    lo = th.LayerSurface(np.array([[0, 0]]), np.array([[3.0, 4.0, 0.0]]), (1, 1), sp)
    assert th.knn_thickness(up, lo)[0, 0] == 5.0
    empty = th.LayerSurface(np.zeros((0, 2), int), np.zeros((0, 3)), (1, 1), sp)
    with pytest.raises(EmptySurface):
        th.knn_thickness(up, empty)


def test_tilted_lower_is_bounded_by_vertical_distance():
    lab = np.zeros((2, 60, 30), dtype=np.uint8)
    for x in range(30):
        lab[:, 5:20 + x // 2, x] = 1
    m = make_mask(lab, VoxelSpacing(4.0, 6.0, 30.0))
    up, lo = th.extract_surfaces(m, 1)
    t = th.knn_thickness(up, lo)
    vertical = (np.array([20 + x // 2 for x in range(30)]) - 5) * 4.0
    assert np.all(t <= vertical[None, :] + 1e-12)
    assert np.array_equal(t, th.brute_force_thickness(up, lo))


def _random_surface(rng, n_b, n_x, base, amp):
    b, x = np.meshgrid(np.arange(n_b), np.arange(n_x), indexing="ij")
    z = base + amp * np.sin(x / 3.0 + b) + rng.uniform(0, amp, b.shape)
    sp = VoxelSpacing(3.9, 11.7, 47.2)
    pts = np.column_stack([b.ravel() * sp.bscan_um, z.ravel(), x.ravel() * sp.lateral_um])
    return th.LayerSurface(np.column_stack([b.ravel(), x.ravel()]), pts, (n_b, n_x), sp)


def test_knn_equals_independent_bruteforce():
    rng = np.random.default_rng(5)
    up = _random_surface(rng, 20, 100, 100.0, 30.0)
    lo = _random_surface(rng, 20, 100, 180.0, 40.0)
    t = th.knn_thickness(up, lo)
    ref = oracles.nearest_bruteforce(up.points, lo.points)
    assert np.array_equal(t[up.columns[:, 0], up.columns[:, 1]], ref)


def test_resample_identity_and_constant():
    rng = np.random.default_rng(0)
    raw = rng.random((350, 350))
    assert np.array_equal(th.resample_map(raw, "mean"), raw)
    for shape in ((128, 512), (49, 350), (500, 37)):
        out = th.resample_map(np.full(shape, 7.25), "mean")
        assert out.shape == (350, 350)
        np.testing.assert_allclose(out, 7.25, rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(ny=st.integers(3, 400), nx=st.integers(3, 400), seed=st.integers(0, 1000))
def test_resample_sum_preserves_total(ny, nx, seed):
    raw = np.random.default_rng(seed).random((ny, nx)) * 1e4
    out = th.resample_map(raw, "sum")
    assert math.isclose(np.nansum(out), raw.sum(), rel_tol=1e-9)


def test_resample_missing_propagation():
    raw = np.full((10, 10), 3.0)
    raw[:, :5] = np.nan
    out = th.resample_map(raw, "mean", (20, 20))
    assert np.all(np.isnan(out[:, :9]))
    assert np.all(out[:, 11:] == 3.0)
    assert np.all(np.isnan(th.resample_map(np.full((4, 4), np.nan), "sum", (8, 8))))


def test_pathology_single_voxel():
    lab = _slab(2, 10, (2, 16, 4))
    lab[1, 5, 2] = 10
    m = make_mask(lab, VoxelSpacing(2.0, 12.0, 17.0))
    raw = th.pathology_counts(m, "Fluid") * m.spacing.voxel_volume_um3
    assert raw.sum() == 408.0
    pm = th.pathology_map(m, "Fluid")
    assert math.isclose(np.nansum(pm.values), 408.0, rel_tol=1e-9)
    assert np.nansum(th.pathology_map(m, "HRF").values) == 0.0


def test_pathology_restricted_to_retina():
    lab = _slab(4, 10, (1, 20, 16))
    lab[0, 6, 0] = 10   # inside the retina
    lab[0, 15, 1] = 10  # inside the choroid, below BM
    m = make_mask(lab)
    assert th.pathology_counts(m, "Fluid").sum() == 1
    assert class_volume_um3(m, "Fluid") == 2 * m.spacing.voxel_volume_um3


def test_pathology_total_matches_class_volume(small_phantom):
    _, mask, truth = small_phantom
    for name in ("Fluid", "HRF"):
        counts = th.pathology_counts(mask, name)
        assert counts.sum() * mask.spacing.voxel_volume_um3 == class_volume_um3(mask, name)


def test_sector_examples():
    lab = th.sector_labels((350, 350))
    c = 175
    assert SECTORS[lab[c, c]] == "CS"
    per_mm = 350 / 6.0
    r = int(c - 2.0 * per_mm)  # 2 mm superior
    assert SECTORS[lab[r, c]] == "SO"
    assert lab[0, 0] == -1


def test_sectors_match_polar_oracle():
    for lat in ("OD", "OS"):
        lab = th.sector_labels((350, 350), laterality=lat)
        per_mm = 350 / 6.0
        for r in range(0, 350, 7):
            for col in range(0, 350, 7):
                want = oracles.etdrs_cell_sector(r, col, 350, per_mm, lat, (175.0, 175.0))
                got = None if lab[r, col] < 0 else SECTORS[lab[r, col]]
                assert got == want, (lat, r, col)


def test_center_out_of_field():
    with pytest.raises(CenterOutOfField):
        th.sector_labels((350, 350), (6.5, 3.0))


def _map(values, sem="mean", lat="OD"):
    return ThicknessMap(values, sem, "RNFL", lat)


def test_mirror_invariance():
    rng = np.random.default_rng(1)
    v = rng.random((350, 350)) * 100
    a = th.etdrs_summarize(_map(v), laterality="OD")
    b = th.etdrs_summarize(_map(v[:, ::-1]), laterality="OS")
    for k in SECTORS:
        assert math.isclose(a.sectors[k], b.sectors[k], rel_tol=1e-12)


def test_laterality_swaps_nasal_temporal():
    rng = np.random.default_rng(2)
    m = _map(rng.random((350, 350)))
    od = th.etdrs_summarize(m, laterality="OD")
    os_ = th.etdrs_summarize(m, laterality="OS")
    for k in ("CS", "SI", "II", "SO", "IO"):
        assert od.sectors[k] == os_.sectors[k]
    assert od.sectors["NI"] == os_.sectors["TI"] and od.sectors["NO"] == os_.sectors["TO"]


def test_summary_aggregation_and_flags():
    m = _map(np.ones((350, 350)), "sum")
    s = th.etdrs_summarize(m)
    assert s.aggregation == "sum" and not s.cs_excluded
    assert s.sectors["CS"] == s.n_cells["CS"]
    s = th.etdrs_summarize(_map(np.full((350, 350), 4.0)))
    assert s.cs_excluded and all(v == 4.0 for v in s.sectors.values())
    back = th.EtdrsSummary.from_json(s.to_json())
    assert back.sectors == s.sectors


def test_empty_sector_is_none():
    v = np.full((350, 350), np.nan)
    s = th.etdrs_summarize(_map(v))
    assert all(val is None for val in s.sectors.values())


def test_flat_phantom_thickness():
    from octquant.phantom import generate
    from conftest import small_spec

    # thicknesses on the 5 um axial grid so the discrete mask can hold them exactly
    nominal = {"RNFL": 50, "GCL+IPL": 70, "INL": 35, "OPL": 30, "ONL+IS": 80, "EZ": 15, "OS": 25, "RPE": 20}
    spec = small_spec(spacing_um=(5.0, 90.0, 1000.0), ilm_depth_um=200.0, layers=nominal, hrf={"count": 0})
    _, mask, truth = generate(spec)
    for name, t in nominal.items():
        raw = th.layer_thickness_raw(mask, name)
        np.testing.assert_allclose(raw, t, rtol=1e-6)
        np.testing.assert_allclose(truth.thickness_um[name], t, rtol=1e-12)
