"""Layered head phantom: tissue tables, electrode geometry, graded grids, voxelation.

The phantom is a bulk sphere containing an ellipsoidal brain wrapped in
concentric tissue shells (CSF, dura, three skull layers, periosteum, scalp),
a blood vessel hugging the cortical surface, and a set of insulated metal
electrodes at configurable depths.  Everything is analytic geometry; the
voxelizer rasterizes it onto a graded tensor-product grid by sampling tissue
at cell centroids.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum

import numpy as np


class NestingError(ValueError):
    """Shell stack does not fit inside the head along some axis."""


class OverlapError(ValueError):
    """Two electrode metal bodies intersect."""


class BudgetError(ValueError):
    """Projected cell count exceeds the configured cap."""


class Tissue(IntEnum):
    BULK = 0
    SCALP = 1
    PERIOSTEUM = 2
    SKULL_CORTICAL = 3
    SKULL_CANCELLOUS = 4
    DURA = 5
    CSF = 6
    GREY_MATTER = 7
    WHITE_MATTER = 8
    VESSEL_WALL = 9
    BLOOD = 10
    ELECTRODE_METAL = 11
    INSULATOR = 12


# Metal is a floating high-conductivity body: it converges to the
# uniform-potential behaviour of a perfect conductor without constraint
# machinery.  The insulator is clamped well above real silicone to keep the
# linear system solvable while staying >=3 orders below the least conductive
# tissue.
METAL_SIGMA = 1.0e6
INSULATOR_SIGMA = 1.0e-9

_TISSUE_SIGMA = {
    Tissue.BULK: 0.33,
    Tissue.SCALP: 0.439,
    Tissue.PERIOSTEUM: 0.060,
    Tissue.SKULL_CORTICAL: 0.006,
    Tissue.SKULL_CANCELLOUS: 0.100,
    Tissue.DURA: 0.060,
    Tissue.CSF: 1.879,
    Tissue.GREY_MATTER: 0.419,
    Tissue.WHITE_MATTER: 0.348,
    Tissue.VESSEL_WALL: 0.232,
    Tissue.BLOOD: 0.662,
    Tissue.ELECTRODE_METAL: METAL_SIGMA,
    Tissue.INSULATOR: INSULATOR_SIGMA,
}


def default_tissue_table() -> dict[Tissue, float]:
    """Low-frequency conductivities (S/m) per tissue, plus clamped metal/insulator."""
    return dict(_TISSUE_SIGMA)


# ---------------------------------------------------------------------------
# Geometry specification
# ---------------------------------------------------------------------------

# Shell stack from the grey-matter surface outwards.
SHELL_ORDER = (
    "csf",
    "dura",
    "skull_inner_cortical",
    "skull_cancellous",
    "skull_outer_cortical",
    "periosteum",
    "scalp",
)

_SHELL_TISSUE = {
    "csf": Tissue.CSF,
    "dura": Tissue.DURA,
    "skull_inner_cortical": Tissue.SKULL_CORTICAL,
    "skull_cancellous": Tissue.SKULL_CANCELLOUS,
    "skull_outer_cortical": Tissue.SKULL_CORTICAL,
    "periosteum": Tissue.PERIOSTEUM,
    "scalp": Tissue.SCALP,
}

DEFAULT_LAYER_THICKNESSES = {
    "csf": 1.0e-3,
    "dura": 0.23e-3,
    "skull_inner_cortical": 1.5e-3,
    "skull_cancellous": 2.5e-3,
    "skull_outer_cortical": 1.5e-3,
    "periosteum": 0.23e-3,
    "scalp": 5.0e-3,
}


@dataclass(frozen=True)
class VesselSpec:
    """Blood vessel following the cortical surface along y, offset in x."""

    lumen_diameter: float = 1.3e-3
    wall_thickness: float = 1.0e-4
    center_offset: float = 3.5e-3
    half_length: float = 15.0e-3

    @property
    def outer_radius(self) -> float:
        return 0.5 * self.lumen_diameter + self.wall_thickness


@dataclass(frozen=True)
class PatchSpec:
    """Disc on the cortical surface within which dipoles are sampled."""

    diameter: float = 22.5e-3
    center_xy: tuple[float, float] = (0.0, 0.0)

    @property
    def radius(self) -> float:
        return 0.5 * self.diameter


@dataclass(frozen=True)
class GeometrySpec:
    head_radius: float = 0.0862
    brain_semi_axes: tuple[float, float, float] = (0.040, 0.030, 0.028)
    # Cortex depth; the grey/white boundary ellipsoid is the brain ellipsoid
    # shrunk by this amount on every semi-axis.
    grey_matter_thickness: float = 2.5e-3
    layer_thicknesses: dict = field(
        default_factory=lambda: dict(DEFAULT_LAYER_THICKNESSES)
    )
    vessel: VesselSpec | None = field(default_factory=VesselSpec)
    cortex_patch: PatchSpec = field(default_factory=PatchSpec)

    def validate(self) -> None:
        missing = [k for k in SHELL_ORDER if k not in self.layer_thicknesses]
        if missing:
            raise NestingError(f"missing shell thicknesses: {missing}")
        bad = {k: v for k, v in self.layer_thicknesses.items() if v <= 0}
        if bad:
            raise NestingError(f"non-positive shell thicknesses: {bad}")
        if self.grey_matter_thickness <= 0:
            raise NestingError("grey_matter_thickness must be positive")
        if min(self.brain_semi_axes) <= self.grey_matter_thickness:
            raise NestingError("brain semi-axes must exceed the cortex thickness")
        total = sum(self.layer_thicknesses[k] for k in SHELL_ORDER)
        worst = max(self.brain_semi_axes) + total
        if worst > self.head_radius:
            raise NestingError(
                f"shells extend to {worst * 1e3:.2f} mm > head radius "
                f"{self.head_radius * 1e3:.2f} mm"
            )

    # -- derived surfaces ---------------------------------------------------

    def white_matter_semi_axes(self) -> np.ndarray:
        return np.asarray(self.brain_semi_axes) - self.grey_matter_thickness

    def shell_semi_axes(self) -> dict[str, np.ndarray]:
        """Outer-boundary semi-axes of each shell, from the brain surface out."""
        axes = {}
        cum = np.asarray(self.brain_semi_axes, dtype=float)
        for name in SHELL_ORDER:
            cum = cum + self.layer_thicknesses[name]
            axes[name] = cum.copy()
        return axes

    def surface_height(self, semi_axes, x, y):
        """z of the upper (+z) surface of an origin-centred ellipsoid at (x, y)."""
        a, b, c = semi_axes
        t = 1.0 - (np.asarray(x) / a) ** 2 - (np.asarray(y) / b) ** 2
        return c * np.sqrt(np.maximum(t, 0.0))

    def patch_center(self) -> np.ndarray:
        cx, cy = self.cortex_patch.center_xy
        cz = self.surface_height(self.brain_semi_axes, cx, cy)
        return np.array([cx, cy, float(cz)])

    def vessel_curve(self, y):
        """Centreline of the vessel: cortical surface at x-offset, lifted by the tube radius."""
        if self.vessel is None:
            raise ValueError("geometry has no vessel")
        v = self.vessel
        zs = self.surface_height(self.brain_semi_axes, v.center_offset, y)
        y = np.asarray(y, dtype=float)
        return np.stack(
            [np.full_like(y, v.center_offset), y, zs + v.outer_radius], axis=-1
        )


# ---------------------------------------------------------------------------
# Electrodes
# ---------------------------------------------------------------------------


class ElectrodeShape(Enum):
    DISC = "disc"
    SPHERICAL_PEG = "spherical_peg"
    CYLINDER = "cylinder"


class Placement(Enum):
    SUBDURAL = "subdural"
    PEG_IN_SKULL = "peg_in_skull"
    SKULL_SURFACE = "skull_surface"
    PERIOSTEUM = "periosteum"
    ENDOVASCULAR = "endovascular"
    RETURN = "return"


_DEFAULT_DIAMETER = {
    Placement.SUBDURAL: 1.5e-3,
    Placement.PEG_IN_SKULL: 3.0e-3,
    Placement.SKULL_SURFACE: 3.0e-3,
    Placement.PERIOSTEUM: 3.0e-3,
    Placement.ENDOVASCULAR: 7.5e-4,
    Placement.RETURN: 6.0e-3,
}


@dataclass(frozen=True)
class ElectrodeSpec:
    id: str
    shape: ElectrodeShape
    placement: Placement
    diameter: float | None = None
    orientation_deg: float = 0.0  # endovascular only: 0/90/180 relative to cortex
    backing_thickness: float = 1.0e-4
    metal_thickness: float = 2.0e-4
    peg_depth: float = 4.0e-3

    def resolved_diameter(self) -> float:
        return self.diameter if self.diameter is not None else _DEFAULT_DIAMETER[self.placement]


def default_electrodes() -> list[ElectrodeSpec]:
    """The seven recording configurations plus the remote return."""
    return [
        ElectrodeSpec("ecog", ElectrodeShape.DISC, Placement.SUBDURAL),
        ElectrodeSpec("peg", ElectrodeShape.SPHERICAL_PEG, Placement.PEG_IN_SKULL),
        ElectrodeSpec("skull_surface", ElectrodeShape.DISC, Placement.SKULL_SURFACE),
        ElectrodeSpec("periosteum", ElectrodeShape.DISC, Placement.PERIOSTEUM),
        ElectrodeSpec("endo_0", ElectrodeShape.DISC, Placement.ENDOVASCULAR, orientation_deg=0.0),
        ElectrodeSpec("endo_90", ElectrodeShape.DISC, Placement.ENDOVASCULAR, orientation_deg=90.0),
        ElectrodeSpec("endo_180", ElectrodeShape.DISC, Placement.ENDOVASCULAR, orientation_deg=180.0),
        ElectrodeSpec("return", ElectrodeShape.CYLINDER, Placement.RETURN),
    ]


# ---------------------------------------------------------------------------
# Analytic solids
# ---------------------------------------------------------------------------


class Ellipsoid:
    def __init__(self, center, semi_axes):
        self.center = np.asarray(center, dtype=float)
        self.semi = np.asarray(semi_axes, dtype=float)

    def contains(self, pts):
        d = (pts - self.center) / self.semi
        return np.einsum("...i,...i->...", d, d) <= 1.0

    def bounds(self):
        return self.center - self.semi, self.center + self.semi


class Cylinder:
    """Finite cylinder from ``base`` along unit ``axis`` for ``length``."""

    def __init__(self, base, axis, length, radius):
        self.base = np.asarray(base, dtype=float)
        self.axis = np.asarray(axis, dtype=float)
        self.axis = self.axis / np.linalg.norm(self.axis)
        self.length = float(length)
        self.radius = float(radius)

    def contains(self, pts):
        d = pts - self.base
        t = d @ self.axis
        perp2 = np.einsum("...i,...i->...", d, d) - t * t
        return (t >= 0.0) & (t <= self.length) & (perp2 <= self.radius**2)

    def bounds(self):
        center = self.base + self.axis * (0.5 * self.length)
        half = (0.5 * self.length) * np.abs(self.axis) + \
            self.radius * np.sqrt(np.maximum(0.0, 1.0 - self.axis**2))
        return center - half, center + half


class SphereCapShell:
    """Hemispherical shell: r_in <= |p - c| <= r_out on the +axis side."""

    def __init__(self, center, r_in, r_out, axis):
        self.center = np.asarray(center, dtype=float)
        self.r_in = float(r_in)
        self.r_out = float(r_out)
        self.axis = np.asarray(axis, dtype=float)
        self.axis = self.axis / np.linalg.norm(self.axis)

    def contains(self, pts):
        d = pts - self.center
        r2 = np.einsum("...i,...i->...", d, d)
        return (r2 >= self.r_in**2) & (r2 <= self.r_out**2) & (d @ self.axis >= 0.0)

    def bounds(self):
        return self.center - self.r_out, self.center + self.r_out


class Sphere(Ellipsoid):
    def __init__(self, center, radius):
        super().__init__(center, (radius, radius, radius))


class SurfaceTube:
    """Tube of constant radius around the vessel centreline (nearest-y foot point)."""

    def __init__(self, geom: GeometrySpec, radius: float):
        self.geom = geom
        self.radius = float(radius)
        self.half_length = geom.vessel.half_length

    def contains(self, pts):
        y = np.clip(pts[..., 1], -self.half_length, self.half_length)
        c = self.geom.vessel_curve(y)
        d = pts - c
        return np.einsum("...i,...i->...", d, d) <= self.radius**2

    def bounds(self):
        v = self.geom.vessel
        ys = np.linspace(-self.half_length, self.half_length, 65)
        c = self.geom.vessel_curve(ys)
        lo = c.min(axis=0) - self.radius
        hi = c.max(axis=0) + self.radius
        return lo, hi


# ---------------------------------------------------------------------------
# Scene
# ---------------------------------------------------------------------------


@dataclass
class PlacedElectrode:
    spec: ElectrodeSpec
    metal: object
    insulators: list
    sensing_centroid: np.ndarray
    axis: np.ndarray


@dataclass
class Scene:
    """Priority-ordered analytic solids; first hit wins, Bulk everywhere else."""

    geometry: GeometrySpec
    solids: list  # (solid, tissue, owner_id or None) in priority order
    electrodes: dict

    def tissue_at(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        out = np.full(pts.shape[:-1], int(Tissue.BULK), dtype=np.uint8)
        unassigned = np.ones(pts.shape[:-1], dtype=bool)
        for solid, tissue, _ in self.solids:
            if not unassigned.any():
                break
            hit = unassigned & solid.contains(pts)
            out[hit] = int(tissue)
            unassigned &= ~hit
        return out

    def electrode_axis(self) -> np.ndarray:
        return np.array([0.0, 0.0, 1.0])


def _disc_electrode(spec, base, axis, sensing_centroid):
    d = spec.resolved_diameter()
    metal = Cylinder(base, axis, spec.metal_thickness, 0.5 * d)
    cup = Cylinder(
        base, axis, spec.metal_thickness + spec.backing_thickness,
        0.5 * d + spec.backing_thickness,
    )
    return PlacedElectrode(spec, metal, [cup], np.asarray(sensing_centroid, float),
                           np.asarray(axis, float))


def build_scene(geom: GeometrySpec, electrodes=None) -> Scene:
    """Assemble the analytic scene: shells, vessel, and placed electrodes.

    Raises NestingError for an inconsistent shell stack and OverlapError if
    two electrode metal bodies intersect.
    """
    geom.validate()
    if electrodes is None:
        electrodes = default_electrodes()

    shells = geom.shell_semi_axes()
    apex = {name: float(ax[2]) for name, ax in shells.items()}
    z_gm = float(geom.brain_semi_axes[2])
    z_skull_outer = apex["skull_outer_cortical"]
    z_periosteum = apex["periosteum"]
    zhat = np.array([0.0, 0.0, 1.0])

    placed = {}
    for spec in electrodes:
        p = spec.placement
        if p is Placement.SUBDURAL:
            base = np.array([0.0, 0.0, z_gm])
            placed[spec.id] = _disc_electrode(spec, base, zhat, base)
        elif p is Placement.SKULL_SURFACE:
            base = np.array([0.0, 0.0, z_skull_outer])
            placed[spec.id] = _disc_electrode(spec, base, zhat, base)
        elif p is Placement.PERIOSTEUM:
            base = np.array([0.0, 0.0, z_periosteum])
            placed[spec.id] = _disc_electrode(spec, base, zhat, base)
        elif p is Placement.PEG_IN_SKULL:
            r = 0.5 * spec.resolved_diameter()
            center = np.array([0.0, 0.0, z_skull_outer - spec.peg_depth + r])
            metal = Sphere(center, r)
            cap = SphereCapShell(center, r, r + spec.backing_thickness, zhat)
            sensing = center - np.array([0.0, 0.0, 0.5 * r])  # lower-hemisphere centroid
            placed[spec.id] = PlacedElectrode(spec, metal, [cap], sensing, -zhat)
        elif p is Placement.ENDOVASCULAR:
            v = geom.vessel
            if v is None:
                raise NestingError("endovascular electrode requires a vessel")
            c0 = geom.vessel_curve(np.array([0.0]))[0]
            phi = np.deg2rad(spec.orientation_deg)
            # 0 deg faces the cortex (down), 90 deg lateral (+x), 180 deg away.
            u = np.array([np.sin(phi), 0.0, -np.cos(phi)])
            lumen_r = 0.5 * v.lumen_diameter
            base = c0 + u * lumen_r  # sensing face pressed on the lumen wall
            placed[spec.id] = _disc_electrode(spec, base, -u, base)
        elif p is Placement.RETURN:
            # rostral (+x) pole, on top of the periosteum
            x0 = float(shells["periosteum"][0])
            base = np.array([x0, 0.0, 0.0])
            placed[spec.id] = _disc_electrode(spec, base, np.array([1.0, 0.0, 0.0]), base)
        else:  # pragma: no cover
            raise ValueError(f"unknown placement {p}")

    _check_metal_overlaps(placed)

    solids = []
    for pe in placed.values():
        solids.append((pe.metal, Tissue.ELECTRODE_METAL, pe.spec.id))
    for pe in placed.values():
        for ins in pe.insulators:
            solids.append((ins, Tissue.INSULATOR, pe.spec.id))

    if geom.vessel is not None:
        v = geom.vessel
        solids.append((SurfaceTube(geom, 0.5 * v.lumen_diameter), Tissue.BLOOD, None))
        solids.append((SurfaceTube(geom, v.outer_radius), Tissue.VESSEL_WALL, None))

    origin = np.zeros(3)
    solids.append((Ellipsoid(origin, geom.white_matter_semi_axes()), Tissue.WHITE_MATTER, None))
    solids.append((Ellipsoid(origin, geom.brain_semi_axes), Tissue.GREY_MATTER, None))
    for name in SHELL_ORDER:
        solids.append((Ellipsoid(origin, shells[name]), _SHELL_TISSUE[name], None))
    # anything else inside or outside the head sphere is bulk (fallback label)

    return Scene(geometry=geom, solids=solids, electrodes=placed)


def _check_metal_overlaps(placed, sample_step=5.0e-5):
    """Detect intersecting metal bodies by sampling the bbox intersection."""
    items = list(placed.values())
    for i in range(len(items)):
        for j in range(i + 1, len(items)):
            a, b = items[i], items[j]
            lo_a, hi_a = a.metal.bounds()
            lo_b, hi_b = b.metal.bounds()
            lo = np.maximum(lo_a, lo_b)
            hi = np.minimum(hi_a, hi_b)
            if np.any(lo >= hi):
                continue
            axes = [np.arange(lo[k], hi[k] + sample_step, sample_step) for k in range(3)]
            pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
            both = a.metal.contains(pts) & b.metal.contains(pts)
            if both.any():
                raise OverlapError(
                    f"electrode metals intersect: {a.spec.id} and {b.spec.id}"
                )


# ---------------------------------------------------------------------------
# Graded grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RefinementBox:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    max_spacing: float


@dataclass(frozen=True)
class GridPreset:
    name: str
    roi_spacing: float
    global_spacing: float
    cell_budget: float


PRESETS = {
    "smoke": GridPreset("smoke", 5.0e-4, 4.0e-3, 1.5e6),
    "desk": GridPreset("desk", 2.5e-4, 2.0e-3, 1.2e7),
    "fine": GridPreset("fine", 1.0e-4, 2.0e-3, 8.0e7),
}

_GROWTH = 1.9  # adjacent-spacing growth used when grading away from a box


def _mesh_gap(length, h_left, h_right, h_cap):
    """Cell sizes filling a gap between neighbours of size h_left / h_right.

    Grows geometrically from both ends (ratio <= _GROWTH), fills the middle
    uniformly, then scales to fit exactly.  Returns an array of sizes.
    """
    if length <= 0:
        return np.zeros(0)
    target = min(h_cap, max(h_left, h_right, 1e-30) * _GROWTH)
    if length <= target * 1.5:
        n = max(1, int(np.ceil(length / target)))
        return np.full(n, length / n)
    left, right = [], []
    cl = min(h_left * _GROWTH, h_cap)
    cr = min(h_right * _GROWTH, h_cap)
    rem = length
    while rem > 1.5 * max(cl, cr):
        if cl <= cr:
            if rem - cl <= 1.5 * max(cl, cr):
                break
            left.append(cl)
            rem -= cl
            cl = min(cl * _GROWTH, h_cap)
        else:
            if rem - cr <= 1.5 * max(cl, cr):
                break
            right.append(cr)
            rem -= cr
            cr = min(cr * _GROWTH, h_cap)
    n_mid = max(1, int(np.ceil(rem / min(h_cap, max(cl, cr)))))
    mid = [rem / n_mid] * n_mid
    sizes = np.array(left + mid + right[::-1])
    return sizes * (length / sizes.sum())


def _axis_coords(lo, hi, h_global, boxes):
    """Strictly increasing edge coordinates for one axis.

    boxes: list of (lo, hi, spacing) requirements; finest requirement wins
    where they overlap.  Box edges are snapped outward to their own spacing
    lattice (anchored at 0) so fine regions get exact spacing.
    """
    snapped = []
    for blo, bhi, h in boxes:
        # snap outward on the coarsest overlapping box's lattice so nested
        # boxes (e.g. the endovascular half-spacing box) tile exactly
        h_snap = h
        for olo, ohi, oh in boxes:
            if olo < bhi and ohi > blo and oh > h_snap and \
                    abs(oh / h - round(oh / h)) < 1e-9:
                h_snap = oh
        blo = max(lo, np.floor(blo / h_snap) * h_snap)
        bhi = min(hi, np.ceil(bhi / h_snap) * h_snap)
        if bhi > blo:
            snapped.append((blo, bhi, h))
    # elementary segments between all edges, each with its min required spacing
    edges = sorted({lo, hi, *(b[0] for b in snapped), *(b[1] for b in snapped)})
    segs = []
    for a, b in zip(edges[:-1], edges[1:]):
        mids = 0.5 * (a + b)
        h = min([s[2] for s in snapped if s[0] <= mids <= s[1]], default=h_global)
        if segs and segs[-1][2] == h:
            segs[-1] = (segs[-1][0], b, h)
        else:
            segs.append((a, b, h))

    coords = [lo]
    for i, (a, b, h) in enumerate(segs):
        length = b - a
        if h < h_global:  # inside a refinement box: uniform at (or below) h
            n = max(1, int(np.ceil(length / h - 1e-9)))
            sizes = np.full(n, length / n)
        else:
            h_left = coords[-1] - coords[-2] if len(coords) > 1 else (
                segs[i + 1][2] if i + 1 < len(segs) else h_global)
            h_right = segs[i + 1][2] if i + 1 < len(segs) else h_global * 2
            h_right = min(h_right, h_global)
            sizes = _mesh_gap(length, min(h_left, h_global), h_right, 0.999 * h_global)
        coords.extend(coords[-1] + np.cumsum(sizes))
    coords = np.asarray(coords)
    coords[-1] = hi
    return coords


@dataclass
class GradedGrid:
    xs: np.ndarray  # cell-edge coordinates, strictly increasing
    ys: np.ndarray
    zs: np.ndarray
    refinement_boxes: list

    @property
    def dims(self):
        return (len(self.xs) - 1, len(self.ys) - 1, len(self.zs) - 1)

    @property
    def n_cells(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def centers(self, axis):
        e = (self.xs, self.ys, self.zs)[axis]
        return 0.5 * (e[:-1] + e[1:])

    def spacings(self, axis):
        e = (self.xs, self.ys, self.zs)[axis]
        return np.diff(e)

    def cell_of(self, point):
        """(i, j, k) of the cell containing a point (clipped to the domain)."""
        idx = []
        for axis, p in enumerate(point):
            e = (self.xs, self.ys, self.zs)[axis]
            i = int(np.searchsorted(e, p, side="right") - 1)
            idx.append(min(max(i, 0), len(e) - 2))
        return tuple(idx)

    def flat_index(self, ijk):
        nx, ny, nz = self.dims
        i, j, k = ijk
        return (i * ny + j) * nz + k

    def cell_volumes(self):
        dx, dy, dz = (self.spacings(a) for a in range(3))
        return (dx[:, None, None] * dy[None, :, None] * dz[None, None, :])


def _electrode_region_box(scene, pad=5.0e-4):
    """Bounding box of the recording electrodes (the remote return is excluded
    so the fine slab does not span the whole head)."""
    los, his = [], []
    for pe in scene.electrodes.values():
        if pe.spec.placement is Placement.RETURN:
            continue
        for solid in [pe.metal, *pe.insulators]:
            lo, hi = solid.bounds()
            los.append(lo)
            his.append(hi)
    return np.min(los, axis=0) - pad, np.max(his, axis=0) + pad


def _dipole_region_box(geom: GeometrySpec, pad=5.0e-4):
    patch = geom.cortex_patch
    cx, cy = patch.center_xy
    r = patch.radius
    # dipole cubes sit just above the grey/white boundary across the patch
    wm = geom.white_matter_semi_axes()
    rim = np.linspace(0, 2 * np.pi, 33)
    zs = geom.surface_height(wm, cx + r * np.cos(rim), cy + r * np.sin(rim))
    z_lo = float(np.min(zs)) - 1.0e-3
    z_hi = float(geom.surface_height(wm, cx, cy)) + 2.0e-3
    lo = np.array([cx - r, cy - r, z_lo]) - pad
    hi = np.array([cx + r, cy + r, z_hi]) + pad
    return lo, hi


def default_refinement_boxes(scene: Scene, preset: GridPreset) -> list[RefinementBox]:
    """ROI box around dipoles + recording electrodes, endovascular box one level finer."""
    dlo, dhi = _dipole_region_box(scene.geometry)
    elo, ehi = _electrode_region_box(scene)
    lo = np.minimum(dlo, elo)
    hi = np.maximum(dhi, ehi)
    boxes = [RefinementBox(tuple(lo), tuple(hi), preset.roi_spacing)]

    endo = [pe for pe in scene.electrodes.values()
            if pe.spec.placement is Placement.ENDOVASCULAR]
    if endo:
        los, his = [], []
        for pe in endo:
            for solid in [pe.metal, *pe.insulators]:
                l, h = solid.bounds()
                los.append(l)
                his.append(h)
        pad = 2.5e-4
        boxes.append(RefinementBox(tuple(np.min(los, axis=0) - pad),
                                   tuple(np.max(his, axis=0) + pad),
                                   0.5 * preset.roi_spacing))
    return boxes


def make_grid(geom: GeometrySpec, scene: Scene, preset, *,
              refinement_boxes=None, cell_budget=None) -> GradedGrid:
    """Graded tensor-product grid covering the head plus one coarse-cell margin.

    The projected cell count is checked against the preset budget before any
    per-cell array is allocated.
    """
    if isinstance(preset, str):
        preset = PRESETS[preset]
    if refinement_boxes is None:
        refinement_boxes = default_refinement_boxes(scene, preset)
    if cell_budget is None:
        cell_budget = preset.cell_budget

    r = geom.head_radius + preset.global_spacing  # one coarse-cell margin
    coords = []
    for axis in range(3):
        boxes = [(b.lo[axis], b.hi[axis], b.max_spacing) for b in refinement_boxes]
        coords.append(_axis_coords(-r, r, preset.global_spacing, boxes))
    grid = GradedGrid(coords[0], coords[1], coords[2], list(refinement_boxes))
    if grid.n_cells > cell_budget:
        raise BudgetError(
            f"projected cell count {grid.n_cells:.3g} exceeds budget {cell_budget:.3g} "
            f"(dims {grid.dims})"
        )
    return grid


# ---------------------------------------------------------------------------
# Voxelation
# ---------------------------------------------------------------------------


@dataclass
class ConductivityGrid:
    grid: GradedGrid
    tissue: np.ndarray        # (nx, ny, nz) uint8 Tissue codes
    sigma: np.ndarray         # (nx, ny, nz) float64 S/m
    electrode_cells: dict     # electrode id -> flat int64 cell indices (metal)
    tissue_table: dict

    def sigma_flat(self):
        return self.sigma.reshape(-1)


def voxelate(scene: Scene, grid: GradedGrid, tissue_table=None,
             slab_cells=4_000_000) -> ConductivityGrid:
    """Rasterize the scene onto the grid by sampling tissue at cell centroids.

    Deterministic for fixed inputs; work is chunked along x to bound memory.
    If an electrode captures no metal cell at this resolution, the cell
    containing its metal-body centre is claimed for it.
    """
    if tissue_table is None:
        tissue_table = default_tissue_table()
    nx, ny, nz = grid.dims
    cx, cy, cz = (grid.centers(a) for a in range(3))
    tissue = np.empty((nx, ny, nz), dtype=np.uint8)
    owners = {eid: [] for eid in scene.electrodes}

    chunk = max(1, int(slab_cells // max(ny * nz, 1)))
    for i0 in range(0, nx, chunk):
        i1 = min(nx, i0 + chunk)
        pts = np.empty((i1 - i0, ny, nz, 3))
        pts[..., 0] = cx[i0:i1, None, None]
        pts[..., 1] = cy[None, :, None]
        pts[..., 2] = cz[None, None, :]
        out = np.full((i1 - i0, ny, nz), int(Tissue.BULK), dtype=np.uint8)
        unassigned = np.ones((i1 - i0, ny, nz), dtype=bool)
        for solid, tis, owner in scene.solids:
            if not unassigned.any():
                break
            lo, hi = solid.bounds()
            if cx[i1 - 1] < lo[0] or cx[i0] > hi[0]:
                continue
            hit = unassigned & solid.contains(pts)
            if owner is not None and tis is Tissue.ELECTRODE_METAL and hit.any():
                ii, jj, kk = np.nonzero(hit)
                owners[owner].append(((ii + i0) * ny + jj) * nz + kk)
            out[hit] = int(tis)
            unassigned &= ~hit
        tissue[i0:i1] = out

    flat = tissue.reshape(-1)
    claimed = np.zeros(flat.size, dtype=bool)
    for parts in owners.values():
        for p in parts:
            claimed[p] = True
    electrode_cells = {}
    for eid, parts in owners.items():
        idx = np.sort(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64)
        if idx.size == 0:
            idx = _rescue_electrode(scene.electrodes[eid], grid, flat, claimed)
        electrode_cells[eid] = idx.astype(np.int64)

    lut = np.zeros(256)
    for t, s in tissue_table.items():
        lut[int(t)] = s
    sigma = lut[tissue]
    return ConductivityGrid(grid, tissue, sigma, electrode_cells, dict(tissue_table))


def _rescue_electrode(pe, grid, flat_tissue, claimed):
    """Claim cells for an electrode too thin to catch any centroid.

    Disc-like metals are inflated along their axis to the local cell size so
    the sensing footprint survives; anything else falls back to the cell at
    the body centre.  Cells already owned by another electrode are never
    taken.
    """
    metal = pe.metal
    lo, hi = metal.bounds()
    if isinstance(metal, Cylinder):
        i0 = grid.cell_of(lo)
        i1 = grid.cell_of(hi)
        h_loc = max(float(np.max(grid.spacings(a)[i0[a]:i1[a] + 1])) for a in range(3))
        if metal.length < h_loc:
            pad = 0.5 * (h_loc - metal.length)
            inflated = Cylinder(metal.base - metal.axis * pad, metal.axis,
                                metal.length + 2 * pad, metal.radius)
            idx = _cells_inside(inflated, grid)
            idx = idx[~claimed[idx]]
            if idx.size:
                flat_tissue[idx] = int(Tissue.ELECTRODE_METAL)
                claimed[idx] = True
                return np.sort(idx)
    # last resort: the cell at the body centre, or the nearest free cell
    # along the electrode axis (stacked electrodes may share one coarse cell)
    center = 0.5 * (lo + hi)
    ijk = grid.cell_of(center)
    h_loc = float(sum(grid.spacings(a)[ijk[a]] * abs(pe.axis[a]) for a in range(3)))
    for step in (0.0, 1.0, -1.0, 2.0, -2.0, 3.0, -3.0):
        p = center + pe.axis * step * h_loc
        j = grid.flat_index(grid.cell_of(p))
        if not claimed[j]:
            flat_tissue[j] = int(Tissue.ELECTRODE_METAL)
            claimed[j] = True
            return np.array([j], dtype=np.int64)
    raise OverlapError(f"cannot place electrode {pe.spec.id}: no free cell near it")


def _cells_inside(solid, grid):
    lo, hi = solid.bounds()
    i0 = grid.cell_of(lo)
    i1 = grid.cell_of(hi)
    axes = [grid.centers(a)[i0[a]:i1[a] + 1] for a in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    hit = solid.contains(pts)
    ii, jj, kk = np.nonzero(hit)
    nx, ny, nz = grid.dims
    return (((ii + i0[0]) * ny + (jj + i0[1])) * nz + (kk + i0[2])).astype(np.int64)


# ---------------------------------------------------------------------------
# Binary export
# ---------------------------------------------------------------------------


def write_conductivity_binary(cg: ConductivityGrid, path) -> None:
    """Flat binary dump: dims (3x uint32 LE), edge coords (float64 LE), tissue codes (uint8)."""
    nx, ny, nz = cg.grid.dims
    with open(path, "wb") as f:
        f.write(struct.pack("<III", nx, ny, nz))
        for e in (cg.grid.xs, cg.grid.ys, cg.grid.zs):
            f.write(np.asarray(e, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(cg.tissue, dtype=np.uint8).tobytes())


def read_conductivity_binary(path):
    """Inverse of write_conductivity_binary; returns (GradedGrid, tissue array)."""
    with open(path, "rb") as f:
        nx, ny, nz = struct.unpack("<III", f.read(12))
        xs = np.frombuffer(f.read(8 * (nx + 1)), dtype="<f8")
        ys = np.frombuffer(f.read(8 * (ny + 1)), dtype="<f8")
        zs = np.frombuffer(f.read(8 * (nz + 1)), dtype="<f8")
        codes = np.frombuffer(f.read(nx * ny * nz), dtype=np.uint8)
    grid = GradedGrid(xs.copy(), ys.copy(), zs.copy(), [])
    return grid, codes.reshape(nx, ny, nz).copy()
