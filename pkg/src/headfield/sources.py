"""Cortical dipole sources expressed as fixed-potential cube pairs.

A dipole is sampled on the cortex, oriented along the local grey/white
boundary normal, and realized in the volume-conduction model as two small
cubes held at opposite potentials.  Each cube's potential is the node-grid
average of the analytic dipole field over the cube volume; the cube pair is
aligned with the grid z-axis regardless of the dipole orientation (the
orientation enters through the potential values).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .headmodel import ConductivityGrid, GeometrySpec

CUBE_EDGE = 1.0e-4
CUBE_SEPARATION = 4.0e-4
CUBE_NODE_STEP = 1.0e-5
SURFACE_STANDOFF = 5.0e-4  # dipole distance from the grey/white boundary
DEFAULT_MOMENT = 1.0e-6    # A*m


class RegionError(ValueError):
    """The sampling patch does not lie on the grey matter."""


class SingularityError(ValueError):
    """An evaluation node coincides with the dipole centre."""


class ResolutionError(ValueError):
    """A source cube captures no grid cell."""


@dataclass(frozen=True)
class Dipole:
    position: tuple[float, float, float]
    orientation: tuple[float, float, float]  # unit vector
    moment: float = DEFAULT_MOMENT

    def position_array(self):
        return np.asarray(self.position, dtype=float)

    def orientation_array(self):
        return np.asarray(self.orientation, dtype=float)


@dataclass(frozen=True)
class CubePair:
    plus_center: tuple[float, float, float]
    minus_center: tuple[float, float, float]
    plus_potential: float
    minus_potential: float
    edge: float = CUBE_EDGE
    separation: float = CUBE_SEPARATION


@dataclass
class SourceSet:
    dipoles: list
    pairs: list
    seed: int
    distribution_index: int = 0

    def positions(self):
        return np.array([d.position for d in self.dipoles])

    def to_json(self) -> str:
        payload = {
            "seed": self.seed,
            "distribution_index": self.distribution_index,
            "dipoles": [
                {
                    "position": list(d.position),
                    "orientation": list(d.orientation),
                    "moment": d.moment,
                }
                for d in self.dipoles
            ],
        }
        return json.dumps(payload, indent=1)

    @classmethod
    def from_json(cls, text: str, medium_sigma: float) -> "SourceSet":
        payload = json.loads(text)
        dipoles = [
            Dipole(tuple(d["position"]), tuple(d["orientation"]), d["moment"])
            for d in payload["dipoles"]
        ]
        pairs = [equivalent_cube_potential(d, medium_sigma) for d in dipoles]
        return cls(dipoles, pairs, payload["seed"], payload["distribution_index"])


# ---------------------------------------------------------------------------
# Analytic dipole potential
# ---------------------------------------------------------------------------


def dipole_point_potential(dipole: Dipole, points, sigma: float):
    """Potential of an ideal current dipole in an infinite homogeneous medium.

    V = |M| cos(theta) / (4 pi sigma r^2), with r and theta measured from the
    dipole centre and moment direction.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    d = pts - dipole.position_array()
    r = np.linalg.norm(d, axis=-1)
    if np.any(r == 0.0):
        raise SingularityError("evaluation point coincides with the dipole centre")
    cos_theta = (d @ dipole.orientation_array()) / r
    v = dipole.moment * cos_theta / (4.0 * np.pi * sigma * r**2)
    return v if np.asarray(points).ndim > 1 else float(v[0])


def _cube_nodes(center, edge, step):
    n = max(1, int(round(edge / step)))
    offs = (np.arange(n) - (n - 1) / 2.0) * step
    gx, gy, gz = np.meshgrid(offs, offs, offs, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3) + np.asarray(center)


def equivalent_cube_potential(dipole: Dipole, medium_sigma: float,
                              edge: float = CUBE_EDGE,
                              separation: float = CUBE_SEPARATION,
                              node_step: float = CUBE_NODE_STEP) -> CubePair:
    """Cube pair carrying the node-averaged analytic dipole potential.

    The pair is centred on the dipole and aligned with the z-axis; each cube's
    potential is the mean of the point formula over a symmetric node grid.
    """
    if medium_sigma <= 0:
        raise ValueError("medium_sigma must be positive")
    pos = dipole.position_array()
    half = 0.5 * separation
    plus_c = pos + np.array([0.0, 0.0, half])
    minus_c = pos - np.array([0.0, 0.0, half])
    unit = Dipole(dipole.position, dipole.orientation, 1.0)
    u_plus = float(np.mean(dipole_point_potential(
        unit, _cube_nodes(plus_c, edge, node_step), medium_sigma)))
    u_minus = float(np.mean(dipole_point_potential(
        unit, _cube_nodes(minus_c, edge, node_step), medium_sigma)))
    # antisymmetric unit-moment average, scaled once by the moment so that
    # moment scaling is a single float multiplication
    v = dipole.moment * (0.5 * (u_plus - u_minus))
    return CubePair(tuple(plus_c), tuple(minus_c), v, -v, edge, separation)


# ---------------------------------------------------------------------------
# Dipole sampling
# ---------------------------------------------------------------------------


def _ellipsoid_normal(point, semi_axes):
    n = np.asarray(point, dtype=float) / np.asarray(semi_axes, dtype=float) ** 2
    return n / np.linalg.norm(n)


def _dipole_at_xy(geom: GeometrySpec, x: float, y: float,
                  moment: float) -> Dipole:
    wm = geom.white_matter_semi_axes()
    z = float(geom.surface_height(wm, x, y))
    surface_pt = np.array([x, y, z])
    normal = _ellipsoid_normal(surface_pt, wm)
    pos = surface_pt + SURFACE_STANDOFF * normal
    return Dipole(tuple(pos), tuple(normal), moment)


def sample_dipoles(geom: GeometrySpec, n: int, seed: int,
                   distribution_index: int = 0,
                   moment: float = DEFAULT_MOMENT,
                   medium_sigma: float | None = None) -> SourceSet:
    """Sample ``n`` dipoles area-uniformly over the cortex patch disc.

    Dipole 0 is always the central dipole on the electrode axis.  Positions
    sit SURFACE_STANDOFF outside the grey/white boundary along the local
    normal; orientations follow that normal.  Deterministic per seed.
    """
    if n < 1:
        raise ValueError("need at least one dipole")
    patch = geom.cortex_patch
    cx, cy = patch.center_xy
    wm = geom.white_matter_semi_axes()
    # the whole patch footprint must lie on the grey matter dome
    rim = 1.0 - ((cx + patch.radius) / wm[0]) ** 2 - ((cy + patch.radius) / wm[1]) ** 2
    if rim <= 0 or geom.surface_height(wm, cx, cy) <= 0:
        raise RegionError("cortex patch does not sit on the grey matter surface")

    if medium_sigma is None:
        medium_sigma = default_grey_matter_sigma()
    dipoles = [_dipole_at_xy(geom, cx, cy, moment)]
    rng = np.random.default_rng(seed)
    while len(dipoles) < n:
        u, v = rng.random(2)
        rho = patch.radius * np.sqrt(u)
        phi = 2.0 * np.pi * v
        dipoles.append(_dipole_at_xy(geom, cx + rho * np.cos(phi),
                                     cy + rho * np.sin(phi), moment))
    pairs = [equivalent_cube_potential(d, medium_sigma) for d in dipoles]
    return SourceSet(dipoles, pairs, seed, distribution_index)


def default_grey_matter_sigma() -> float:
    from .headmodel import Tissue, default_tissue_table

    return default_tissue_table()[Tissue.GREY_MATTER]


# ---------------------------------------------------------------------------
# Dirichlet imposition
# ---------------------------------------------------------------------------


@dataclass
class ImposedPair:
    """One cube pair mapped onto grid cells."""

    plus_cells: np.ndarray   # flat indices
    minus_cells: np.ndarray
    plus_value: float
    minus_value: float
    center_ijk: tuple        # cell containing the dipole centre
    spacing: float           # local z spacing
    separation_cells: int    # realized centre-to-centre separation in cells
    snapped: bool


@dataclass
class DirichletSet:
    indices: np.ndarray  # flat cell indices, sorted
    values: np.ndarray
    pairs: list          # ImposedPair metadata, in input order


def _cells_in_cube(grid, center, edge):
    idx = []
    half = 0.5 * edge
    ranges = []
    for axis in range(3):
        e = (grid.xs, grid.ys, grid.zs)[axis]
        c = grid.centers(axis)
        lo = np.searchsorted(c, center[axis] - half, side="left")
        hi = np.searchsorted(c, center[axis] + half, side="right")
        ranges.append(range(lo, hi))
    for i in ranges[0]:
        for j in ranges[1]:
            for k in ranges[2]:
                idx.append(grid.flat_index((i, j, k)))
    return np.array(sorted(idx), dtype=np.int64)


def impose_sources(cg: ConductivityGrid, pairs, *, allow_snap: bool = True) -> DirichletSet:
    """Map cube pairs to fixed-potential cells.

    On grids whose local spacing exceeds the cube edge, each cube snaps to the
    single cell containing the dipole centre offset by +-2 cells along z, so
    the pair stays resolvable with a 4-cell separation.  Without snapping, an
    empty capture raises ResolutionError.
    """
    if isinstance(pairs, CubePair):
        pairs = [pairs]
    grid = cg.grid
    nx, ny, nz = grid.dims
    all_idx, all_val, metas = [], [], []
    for pair in pairs:
        plus_c = np.asarray(pair.plus_center)
        minus_c = np.asarray(pair.minus_center)
        mid = 0.5 * (plus_c + minus_c)
        ci, cj, ck = grid.cell_of(mid)
        h_z = float(grid.spacings(2)[ck])
        snapped = h_z > pair.edge * 1.0001
        if not snapped:
            plus_cells = _cells_in_cube(grid, plus_c, pair.edge)
            minus_cells = _cells_in_cube(grid, minus_c, pair.edge)
            if plus_cells.size == 0 or minus_cells.size == 0:
                if not allow_snap:
                    raise ResolutionError("source cube captures no cell")
                plus_cells = np.array([grid.flat_index(grid.cell_of(plus_c))], dtype=np.int64)
                minus_cells = np.array([grid.flat_index(grid.cell_of(minus_c))], dtype=np.int64)
            sep_cells = int(round(pair.separation / h_z))
        else:
            if not allow_snap:
                raise ResolutionError(
                    f"grid spacing {h_z:.2e} m cannot represent cube edge {pair.edge:.2e} m"
                )
            if ck - 2 < 0 or ck + 2 >= nz:
                raise ResolutionError("snapped cube pair leaves the grid")
            plus_cells = np.array([grid.flat_index((ci, cj, ck + 2))], dtype=np.int64)
            minus_cells = np.array([grid.flat_index((ci, cj, ck - 2))], dtype=np.int64)
            sep_cells = 4
        metas.append(ImposedPair(plus_cells, minus_cells,
                                 pair.plus_potential, pair.minus_potential,
                                 (ci, cj, ck), h_z, sep_cells, snapped))
        all_idx.extend([plus_cells, minus_cells])
        all_val.extend([
            np.full(plus_cells.size, pair.plus_potential),
            np.full(minus_cells.size, pair.minus_potential),
        ])
    indices = np.concatenate(all_idx)
    values = np.concatenate(all_val)
    order = np.argsort(indices, kind="stable")
    indices = indices[order]
    values = values[order]
    if indices.size != np.unique(indices).size:
        raise ResolutionError("cube pairs map to overlapping cells")
    return DirichletSet(indices, values, metas)
