import numpy as np
import pytest

from headfield.headmodel import (
    BudgetError,
    ElectrodeShape,
    ElectrodeSpec,
    GeometrySpec,
    NestingError,
    OverlapError,
    PatchSpec,
    Placement,
    PRESETS,
    RefinementBox,
    Scene,
    Tissue,
    VesselSpec,
    build_scene,
    default_electrodes,
    default_tissue_table,
    make_grid,
    read_conductivity_binary,
    voxelate,
    write_conductivity_binary,
)


def small_geometry(vessel=False):
    return GeometrySpec(
        head_radius=0.016,
        brain_semi_axes=(0.008, 0.007, 0.006),
        grey_matter_thickness=1.5e-3,
        layer_thicknesses={k: 1.0e-3 for k in (
            "csf", "dura", "skull_inner_cortical", "skull_cancellous",
            "skull_outer_cortical", "periosteum", "scalp")},
        vessel=VesselSpec() if vessel else None,
        cortex_patch=PatchSpec(diameter=4e-3),
    )


class TestTissueTable:
    def test_paper_values(self):
        t = default_tissue_table()
        assert t[Tissue.SCALP] == 0.439
        assert t[Tissue.SKULL_CORTICAL] == 0.006
        assert t[Tissue.SKULL_CANCELLOUS] == 0.100
        assert t[Tissue.DURA] == 0.060
        assert t[Tissue.CSF] == 1.879
        assert t[Tissue.GREY_MATTER] == 0.419
        assert t[Tissue.WHITE_MATTER] == 0.348
        assert t[Tissue.BLOOD] == 0.662
        assert t[Tissue.VESSEL_WALL] == 0.232
        assert t[Tissue.PERIOSTEUM] == 0.060  # dura-equivalent
        assert t[Tissue.BULK] == 0.33

    def test_clamped_values_positive(self):
        t = default_tissue_table()
        assert all(v > 0 for v in t.values())
        assert t[Tissue.INSULATOR] == 1e-9
        assert t[Tissue.ELECTRODE_METAL] == 1e6


class TestScene:
    def test_origin_is_white_matter(self, default_scene):
        assert default_scene.tissue_at(np.zeros((1, 3)))[0] == Tissue.WHITE_MATTER

    def test_outside_head_is_bulk(self, default_scene):
        assert default_scene.tissue_at(np.array([[0.09, 0, 0]]))[0] == Tissue.BULK

    def test_vessel_lumen_is_blood(self, default_scene):
        geom = default_scene.geometry
        p = geom.vessel_curve(np.array([0.0]))[0]
        assert default_scene.tissue_at(p.reshape(1, 3))[0] == Tissue.BLOOD
        assert np.isclose(p[0], 3.5e-3)

    def test_membership_total(self, default_scene):
        rng = np.random.default_rng(3)
        r = default_scene.geometry.head_radius
        pts = rng.uniform(-r, r, size=(100_000, 3))
        codes = default_scene.tissue_at(pts)
        valid = {int(t) for t in Tissue}
        assert set(np.unique(codes)).issubset(valid)

    def test_layer_order_along_axis(self, default_scene):
        # off the electrode axis (x=10 mm): pure tissue stack, no metal
        zs = np.arange(0.0, 0.05, 2e-5)
        pts = np.stack([np.full_like(zs, 1e-2), np.zeros_like(zs), zs], axis=1)
        codes = default_scene.tissue_at(pts)
        seen = [Tissue(c).name for c, prev in zip(codes, np.r_[255, codes[:-1]])
                if c != prev]
        assert seen == [
            "WHITE_MATTER", "GREY_MATTER", "CSF", "DURA", "SKULL_CORTICAL",
            "SKULL_CANCELLOUS", "SKULL_CORTICAL", "PERIOSTEUM", "SCALP", "BULK",
        ]

    def test_nesting_error(self):
        geom = GeometrySpec(layer_thicknesses={
            k: 10e-3 for k in GeometrySpec().layer_thicknesses})
        with pytest.raises(NestingError):
            build_scene(geom)

    def test_overlap_error(self):
        els = default_electrodes() + [
            ElectrodeSpec("ecog2", ElectrodeShape.DISC, Placement.SUBDURAL)]
        with pytest.raises(OverlapError, match="ecog"):
            build_scene(GeometrySpec(), els)

    def test_default_electrode_diameters(self):
        d = {e.id: e.resolved_diameter() for e in default_electrodes()}
        assert d["ecog"] == 1.5e-3
        assert d["peg"] == 3e-3
        assert d["skull_surface"] == 3e-3
        assert d["periosteum"] == 3e-3
        assert d["endo_0"] == 7.5e-4
        assert d["return"] == 6e-3


class TestGrid:
    def test_desk_preset_spacings(self, default_scene):
        grid = make_grid(default_scene.geometry, default_scene, "desk")
        roi = grid.refinement_boxes[0]
        for axis in range(3):
            sp = grid.spacings(axis)
            c = grid.centers(axis)
            inside = (c > roi.lo[axis]) & (c < roi.hi[axis])
            # ROI spacing, except inside the nested endovascular box (finer)
            ok = np.isclose(sp[inside], 2.5e-4, rtol=1e-9) | \
                np.isclose(sp[inside], 1.25e-4, rtol=1e-9)
            assert ok.all()
            assert np.isclose(sp[inside], 2.5e-4, rtol=1e-9).sum() > 0.5 * inside.sum()
            assert sp.max() <= 2.0e-3 * (1 + 1e-9)

    def test_smoke_preset_roi_spacing(self, smoke_grid):
        roi = smoke_grid.refinement_boxes[0]
        c = smoke_grid.centers(2)
        sp = smoke_grid.spacings(2)
        inside = (c > roi.lo[2]) & (c < roi.hi[2])
        ok = np.isclose(sp[inside], 5.0e-4, rtol=1e-9) | \
            np.isclose(sp[inside], 2.5e-4, rtol=1e-9)
        assert ok.all()
        assert np.isclose(sp[inside], 5.0e-4, rtol=1e-9).sum() > 0.5 * inside.sum()

    def test_grading_ratio(self, smoke_grid):
        for axis in range(3):
            sp = smoke_grid.spacings(axis)
            ratio = sp[1:] / sp[:-1]
            assert ratio.max() <= 2.0 + 1e-9
            assert ratio.min() >= 0.5 - 1e-9

    def test_covers_head_plus_margin(self, smoke_grid, default_scene):
        r = default_scene.geometry.head_radius
        g = PRESETS["smoke"].global_spacing
        for e in (smoke_grid.xs, smoke_grid.ys, smoke_grid.zs):
            assert e[0] <= -r - 0.99 * g
            assert e[-1] >= r + 0.99 * g

    def test_endovascular_box_finer(self, smoke_grid):
        assert len(smoke_grid.refinement_boxes) == 2
        endo = smoke_grid.refinement_boxes[1]
        assert endo.max_spacing == 0.5 * PRESETS["smoke"].roi_spacing
        c = smoke_grid.centers(0)
        sp = smoke_grid.spacings(0)
        inside = (c > endo.lo[0]) & (c < endo.hi[0])
        assert sp[inside].max() <= endo.max_spacing * (1 + 1e-9)

    def test_budget_error_before_allocation(self, default_scene):
        with pytest.raises(BudgetError, match="budget"):
            make_grid(default_scene.geometry, default_scene, "desk", cell_budget=1e4)

    def test_smoke_under_budget(self, smoke_grid):
        assert smoke_grid.n_cells < 1.5e6

    def test_paper_scale_roi_out_of_desk_budget(self, default_scene):
        # a 0.1 mm ROI (the published resolution) must not fit the desk budget
        preset = PRESETS["desk"]
        boxes = [RefinementBox(b.lo, b.hi, 1.0e-4 if i == 0 else 0.5e-4)
                 for i, b in enumerate(make_grid(
                     default_scene.geometry, default_scene, "desk").refinement_boxes)]
        with pytest.raises(BudgetError):
            make_grid(default_scene.geometry, default_scene, preset,
                      refinement_boxes=boxes)

    def test_deterministic(self, default_scene):
        g1 = make_grid(default_scene.geometry, default_scene, "smoke")
        g2 = make_grid(default_scene.geometry, default_scene, "smoke")
        for a, b in ((g1.xs, g2.xs), (g1.ys, g2.ys), (g1.zs, g2.zs)):
            assert np.array_equal(a, b)


class TestVoxelate:
    def test_homogeneous_bulk(self):
        geom = small_geometry()
        scene = Scene(geometry=geom, solids=[], electrodes={})
        grid = make_grid(geom, scene, "smoke",
                         refinement_boxes=[RefinementBox((-1e-3,) * 3, (1e-3,) * 3, 5e-4)])
        cg = voxelate(scene, grid)
        assert np.all(cg.tissue == Tissue.BULK)
        assert np.all(cg.sigma == 0.33)

    def test_blood_volume_oracle(self, default_scene):
        # refine along the whole vessel; staircase volume vs analytic tube volume
        geom = default_scene.geometry
        v = geom.vessel
        ys = np.linspace(-v.half_length, v.half_length, 2001)
        curve = geom.vessel_curve(ys)
        seglen = np.linalg.norm(np.diff(curve, axis=0), axis=1).sum()
        lumen_volume = np.pi * (0.5 * v.lumen_diameter) ** 2 * seglen

        lo = curve.min(axis=0) - 2e-3
        hi = curve.max(axis=0) + 2e-3
        grid = make_grid(geom, default_scene, "desk",
                         refinement_boxes=[RefinementBox(tuple(lo), tuple(hi), 2.5e-4)])
        cg = voxelate(default_scene, grid)
        vox_volume = cg.grid.cell_volumes()[cg.tissue == Tissue.BLOOD].sum()
        assert vox_volume > 0
        assert abs(vox_volume - lumen_volume) / lumen_volume < 0.30

    def test_ecog_metal_connected(self, smoke_model):
        from scipy import ndimage

        cg = smoke_model
        mask = np.zeros(cg.tissue.size, dtype=bool)
        mask[cg.electrode_cells["ecog"]] = True
        _, n = ndimage.label(mask.reshape(cg.tissue.shape))
        assert n == 1

    def test_every_electrode_has_cells(self, smoke_model):
        for eid, cells in smoke_model.electrode_cells.items():
            assert cells.size > 0, eid

    def test_deterministic_bit_identical(self, default_scene):
        geom = small_geometry(vessel=True)
        scene = build_scene(geom, [])
        box = [RefinementBox((-4e-3, -4e-3, 0.0), (4e-3, 4e-3, 8e-3), 5e-4)]
        grid = make_grid(geom, scene, "smoke", refinement_boxes=box)
        a = voxelate(scene, grid)
        b = voxelate(scene, grid)
        assert a.tissue.tobytes() == b.tissue.tobytes()
        assert a.sigma.tobytes() == b.sigma.tobytes()

    def test_grey_matter_nesting(self, smoke_model, default_scene):
        cg = smoke_model
        gm = cg.tissue == Tissue.GREY_MATTER
        if not gm.any():
            pytest.skip("no grey matter cells on this grid")
        centers = np.stack(np.meshgrid(cg.grid.centers(0), cg.grid.centers(1),
                                       cg.grid.centers(2), indexing="ij"), axis=-1)
        pts = centers[gm]
        csf_axes = default_scene.geometry.shell_semi_axes()["csf"]
        rho = np.sqrt(((pts / csf_axes) ** 2).sum(axis=1))
        excess = np.linalg.norm(pts, axis=1) * np.maximum(0.0, 1.0 - 1.0 / rho)
        dx = np.diff(cg.grid.xs).max()
        dy = np.diff(cg.grid.ys).max()
        dz = np.diff(cg.grid.zs).max()
        # staircase cells may poke out by at most one (local) cell diagonal;
        # grey matter lives in the fine region, so bound with the fine diagonal
        roi = cg.grid.refinement_boxes[0].max_spacing
        assert excess.max() <= np.sqrt(3) * roi + 1e-12

    def test_volume_convergence(self):
        geom = small_geometry()
        scene = build_scene(geom, [])
        full = RefinementBox((-0.018,) * 3, (0.018,) * 3, None)
        errors = {t: [] for t in (Tissue.WHITE_MATTER, Tissue.GREY_MATTER, Tissue.CSF)}
        wm = geom.white_matter_semi_axes()
        gm = np.asarray(geom.brain_semi_axes)
        csf = geom.shell_semi_axes()["csf"]
        vol = lambda ax: 4.0 / 3.0 * np.pi * np.prod(ax)
        analytic = {
            Tissue.WHITE_MATTER: vol(wm),
            Tissue.GREY_MATTER: vol(gm) - vol(wm),
            Tissue.CSF: vol(csf) - vol(gm),
        }
        for h in (1.6e-3, 0.8e-3, 0.4e-3):
            grid = make_grid(geom, scene, "smoke", cell_budget=2e6,
                             refinement_boxes=[RefinementBox(full.lo, full.hi, h)])
            cg = voxelate(scene, grid)
            vols = cg.grid.cell_volumes()
            for t in errors:
                measured = vols[cg.tissue == t].sum()
                errors[t].append(abs(measured - analytic[t]) / analytic[t])
        for t, errs in errors.items():
            assert errs[0] > errs[1] > errs[2], (Tissue(t).name, errs)


class TestExport:
    def test_roundtrip(self, smoke_model, tmp_path):
        path = tmp_path / "grid.bin"
        write_conductivity_binary(smoke_model, path)
        grid, codes = read_conductivity_binary(path)
        assert grid.dims == smoke_model.grid.dims
        assert np.array_equal(grid.xs, smoke_model.grid.xs)
        assert np.array_equal(codes, smoke_model.tissue)
        expected = 12 + 8 * (sum(grid.dims) + 3) + np.prod(grid.dims)
        assert path.stat().st_size == expected
