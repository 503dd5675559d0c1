import numpy as np
import pytest

from headfield.headmodel import ConductivityGrid, GeometrySpec, GradedGrid, Tissue
from headfield.sources import (
    CUBE_EDGE,
    CubePair,
    Dipole,
    ResolutionError,
    RegionError,
    SingularityError,
    SourceSet,
    dipole_point_potential,
    equivalent_cube_potential,
    impose_sources,
    sample_dipoles,
)


def make_dipole(position=(0, 0, 0), orientation=(0, 0, 1), moment=1e-6):
    return Dipole(tuple(position), tuple(orientation), moment)


def uniform_grid(h=2.5e-4, half=5e-3, sigma=0.33):
    n = int(round(2 * half / h))
    e = np.linspace(-half, half, n + 1)
    grid = GradedGrid(e, e.copy(), e.copy(), [])
    shape = grid.dims
    return ConductivityGrid(grid, np.full(shape, Tissue.BULK, np.uint8),
                            np.full(shape, sigma), {}, {Tissue.BULK: sigma})


class TestPointPotential:
    def test_on_axis_02mm(self):
        d = make_dipole()
        v = dipole_point_potential(d, [0, 0, 2e-4], 0.33)
        assert v == pytest.approx(6.0286, abs=5e-4)

    def test_on_axis_10mm(self):
        d = make_dipole()
        v = dipole_point_potential(d, [0, 0, 1e-2], 0.33)
        assert v == pytest.approx(2.4114e-3, rel=1e-4)

    def test_equatorial_zero(self):
        d = make_dipole()
        assert dipole_point_potential(d, [3e-4, 0, 0], 0.33) == pytest.approx(0.0, abs=1e-15)

    def test_singularity(self):
        d = make_dipole()
        with pytest.raises(SingularityError):
            dipole_point_potential(d, [0, 0, 0], 0.33)


class TestCubePotential:
    def test_sign_antisymmetry_exact(self):
        d = make_dipole(position=(1e-3, -2e-3, 0.5e-3))
        flipped = make_dipole(position=d.position,
                              orientation=tuple(-o for o in d.orientation))
        a = equivalent_cube_potential(d, 0.419)
        b = equivalent_cube_potential(flipped, 0.419)
        assert a.plus_potential == -b.plus_potential
        assert a.minus_potential == -b.minus_potential
        assert a.plus_potential == -a.minus_potential

    def test_moment_linearity_exact(self):
        d1 = make_dipole(moment=1e-6)
        d2 = make_dipole(moment=2.0 * 1e-6)
        a = equivalent_cube_potential(d1, 0.419)
        b = equivalent_cube_potential(d2, 0.419)
        assert b.plus_potential == 2.0 * a.plus_potential
        d3 = make_dipole(moment=3.0 * 1e-6)
        c = equivalent_cube_potential(d3, 0.419)
        assert c.plus_potential == pytest.approx(3.0 * a.plus_potential, rel=1e-15)

    def test_node_density_converged(self):
        # default node grid vs 10x denser: < 1% relative difference
        d = make_dipole()
        a = equivalent_cube_potential(d, 0.33)
        b = equivalent_cube_potential(d, 0.33, node_step=1e-6)
        assert abs(a.plus_potential - b.plus_potential) / abs(b.plus_potential) < 0.01

    def test_average_approaches_point_as_edge_shrinks(self):
        d = make_dipole()
        point = dipole_point_potential(d, [0, 0, 2e-4], 0.33)
        diffs = []
        for edge in (1e-4, 0.5e-4, 0.25e-4):
            pair = equivalent_cube_potential(d, 0.33, edge=edge, node_step=edge / 10)
            diffs.append(abs(pair.plus_potential - point) / point)
        assert diffs[0] > diffs[1] > diffs[2]
        assert diffs[2] < 0.01

    def test_tilted_orientation_uses_true_angle(self):
        # cubes stay z-aligned; a 90-degree dipole yields (near) zero potentials
        d = make_dipole(orientation=(1, 0, 0))
        pair = equivalent_cube_potential(d, 0.33)
        assert abs(pair.plus_potential) < 1e-12


class TestSampling:
    def test_single_dipole_is_central(self):
        geom = GeometrySpec()
        ss = sample_dipoles(geom, 1, seed=42)
        assert len(ss.dipoles) == 1
        d = ss.dipoles[0]
        assert d.position[0] == pytest.approx(0.0, abs=1e-15)
        assert d.position[1] == pytest.approx(0.0, abs=1e-15)
        wm_apex = geom.white_matter_semi_axes()[2]
        assert d.position[2] == pytest.approx(wm_apex + 5e-4, rel=1e-12)
        assert np.allclose(d.orientation, (0, 0, 1))

    def test_two_seeds_differ_inside_patch(self):
        geom = GeometrySpec()
        a = sample_dipoles(geom, 50, seed=1)
        b = sample_dipoles(geom, 50, seed=2)
        assert not np.allclose(a.positions(), b.positions())
        for ss in (a, b):
            xy = ss.positions()[:, :2]
            assert np.all(np.linalg.norm(xy, axis=1) <= geom.cortex_patch.radius + 1e-4)

    def test_orientations_are_boundary_normals(self):
        geom = GeometrySpec()
        ss = sample_dipoles(geom, 20, seed=3)
        wm = geom.white_matter_semi_axes()
        for d in ss.dipoles:
            p = d.position_array() - 5e-4 * d.orientation_array()  # back on the surface
            n = p / wm**2
            n = n / np.linalg.norm(n)
            assert np.linalg.norm(n - d.orientation_array()) < 1e-9

    def test_half_disc_fraction(self):
        geom = GeometrySpec()
        ss = sample_dipoles(geom, 10_001, seed=11)
        xs = ss.positions()[1:, 0]  # skip the imposed central dipole
        frac = np.mean(xs > 0)
        assert abs(frac - 0.5) < 0.02

    def test_deterministic(self):
        geom = GeometrySpec()
        a = sample_dipoles(geom, 10, seed=5)
        b = sample_dipoles(geom, 10, seed=5)
        assert a.positions().tobytes() == b.positions().tobytes()

    def test_region_error(self):
        geom = GeometrySpec()
        bad = GeometrySpec(cortex_patch=type(geom.cortex_patch)(
            diameter=22.5e-3, center_xy=(0.05, 0.0)))
        with pytest.raises(RegionError):
            sample_dipoles(bad, 5, seed=0)


class TestImpose:
    def test_snap_one_cell_per_cube(self):
        cg = uniform_grid(h=2.5e-4)
        d = make_dipole(position=(1.1e-4, -0.7e-4, 2.3e-4))
        pair = equivalent_cube_potential(d, 0.33)
        ds = impose_sources(cg, pair)
        p = ds.pairs[0]
        assert p.snapped
        assert p.plus_cells.size == 1 and p.minus_cells.size == 1
        assert p.separation_cells == 4
        # 4-cell separation along z only
        nz = cg.grid.dims[2]
        assert p.plus_cells[0] - p.minus_cells[0] == 4
        assert ds.values[ds.indices == p.plus_cells[0]][0] == pair.plus_potential

    def test_fine_grid_natural_capture(self):
        cg = uniform_grid(h=1e-4, half=2e-3)
        d = make_dipole()
        pair = equivalent_cube_potential(d, 0.33)
        ds = impose_sources(cg, pair)
        p = ds.pairs[0]
        assert not p.snapped
        assert p.plus_cells.size >= 1
        kz_plus = p.plus_cells[0] % cg.grid.dims[2]
        kz_minus = p.minus_cells[0] % cg.grid.dims[2]
        assert kz_plus - kz_minus == 4

    def test_two_pairs_disjoint(self):
        cg = uniform_grid()
        d1 = make_dipole(position=(0, 0, 0))
        d2 = make_dipole(position=(2e-3, 0, 0))
        pairs = [equivalent_cube_potential(d, 0.33) for d in (d1, d2)]
        ds = impose_sources(cg, pairs)
        cells = [set(p.plus_cells) | set(p.minus_cells) for p in ds.pairs]
        assert cells[0].isdisjoint(cells[1])
        assert ds.indices.size == 4

    def test_plus_minus_disjoint_nonempty(self):
        cg = uniform_grid()
        ds = impose_sources(cg, equivalent_cube_potential(make_dipole(), 0.33))
        p = ds.pairs[0]
        assert p.plus_cells.size and p.minus_cells.size
        assert set(p.plus_cells).isdisjoint(p.minus_cells)

    def test_resolution_error_without_snap(self):
        cg = uniform_grid(h=2.5e-4)
        pair = equivalent_cube_potential(make_dipole(), 0.33)
        with pytest.raises(ResolutionError):
            impose_sources(cg, pair, allow_snap=False)


class TestSerialization:
    def test_roundtrip_bit_exact(self):
        geom = GeometrySpec()
        ss = sample_dipoles(geom, 7, seed=9, distribution_index=3)
        text = ss.to_json()
        back = SourceSet.from_json(text, medium_sigma=0.419)
        assert back.seed == ss.seed
        assert back.distribution_index == 3
        assert back.positions().tobytes() == ss.positions().tobytes()
        for a, b in zip(ss.pairs, back.pairs):
            assert a.plus_potential == b.plus_potential
