"""Quasi-static ohmic solver on the graded grid.

Finite-volume 7-point stencil with harmonic-mean face conductances and
zero-flux outer boundaries.  Source cubes enter as fixed-potential cells
(eliminated by projection); the system is solved with conjugate gradients on
the symmetrically diagonally scaled operator, preconditioned by a smoothed-
aggregation multigrid hierarchy for large grids.  All reductions use numpy's
pairwise summation, so results do not depend on worker or thread counts.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import lattice
from .headmodel import ConductivityGrid, Placement, Scene
from .sources import DirichletSet, SourceSet, impose_sources


class SingularSystemError(ValueError):
    """No Dirichlet constraint: the pure-Neumann operator is singular."""


class EmptyElectrodeError(ValueError):
    """Electrode has no metal cell on this grid."""


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual_history):
        super().__init__(message)
        self.residual_history = residual_history


_AMG_THRESHOLD = 200_000  # below this, plain scaled CG is fast enough


@dataclass
class LinearSystem:
    """Scaled operator plus constraint data; the heavy parts live in a per-grid cache."""

    A_scaled: sp.csr_matrix
    diag: np.ndarray           # unscaled diagonal
    dsq: np.ndarray            # 1/sqrt(diag)
    dirichlet: DirichletSet
    preconditioner: object     # callable r -> z, or None for identity
    n: int


@dataclass
class PotentialField:
    values: np.ndarray         # flat, one potential per cell (V)
    iterations: int
    rel_residual: float


@dataclass
class ElectrodeReading:
    mean: float
    spread: float              # max - min over the electrode's metal cells


@dataclass
class LeadRow:
    electrode: str
    dipole: int
    distribution: int
    potential_v: float
    distance_m: float
    angle_deg: float


@dataclass
class LeadTable:
    rows: list

    CSV_HEADER = "electrode,dipole,distribution,potential_v,distance_m,angle_deg"

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.CSV_HEADER + "\n")
            for r in self.rows:
                f.write(f"{r.electrode},{r.dipole},{r.distribution},"
                        f"{r.potential_v!r},{r.distance_m!r},{r.angle_deg!r}\n")

    def by_electrode(self, electrode: str):
        return [r for r in self.rows if r.electrode == electrode]


# ---------------------------------------------------------------------------
# Operator construction (cached per conductivity grid)
# ---------------------------------------------------------------------------


def _grid_cache(cg: ConductivityGrid) -> dict:
    cache = getattr(cg, "_solver_cache", None)
    if cache is None:
        cache = {}
        cg._solver_cache = cache
    return cache


def _insulate_electrode_contacts(cg, bands):
    """Sub-cell silicone between stacked electrodes: when two electrodes' metal
    cells rasterize into face-adjacent cells, give that face the insulator
    conductivity instead of the metal-metal harmonic mean."""
    from .headmodel import INSULATOR_SIGMA, METAL_SIGMA

    nx, ny, nz = cg.grid.dims
    strides = (ny * nz, nz, 1)
    ids = list(cg.electrode_cells)
    factor = INSULATOR_SIGMA / METAL_SIGMA
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            c1 = cg.electrode_cells[ids[a]]
            c2 = cg.electrode_cells[ids[b]]
            for axis, stride in enumerate(strides):
                for lo_set, hi_set in ((c1, c2), (c2, c1)):
                    shared = np.intersect1d(lo_set + stride, hi_set)
                    if shared.size == 0:
                        continue
                    lower = shared - stride
                    i = lower // (ny * nz)
                    j = (lower // nz) % ny
                    k = lower % nz
                    bands[axis][i, j, k] *= factor


def build_operator(cg: ConductivityGrid):
    """Scaled CSR operator and diagonal for a conductivity grid (memoized)."""
    cache = _grid_cache(cg)
    if "A_scaled" not in cache:
        grid = cg.grid
        bx, by, bz, _ = lattice.assemble_bands(grid.xs, grid.ys, grid.zs, cg.sigma)
        _insulate_electrode_contacts(cg, (bx, by, bz))
        diag = lattice.accumulate_diag(bx, by, bz)
        dsq = 1.0 / np.sqrt(diag.reshape(-1))
        # scale the face conductances directly: As = D^-1/2 A D^-1/2
        d3 = dsq.reshape(diag.shape)
        bx = bx * d3[:-1] * d3[1:]
        by = by * d3[:, :-1] * d3[:, 1:]
        bz = bz * d3[:, :, :-1] * d3[:, :, 1:]
        ones = np.ones(diag.size)
        cache["A_scaled"] = lattice.bands_to_csr(bx, by, bz, ones.reshape(diag.shape))
        cache["diag"] = diag.reshape(-1)
        cache["dsq"] = dsq
    return cache["A_scaled"], cache["diag"], cache["dsq"]


def _build_amg(cg: ConductivityGrid):
    cache = _grid_cache(cg)
    if "amg" not in cache:
        import pyamg

        A_scaled, _, _ = build_operator(cg)
        ml = pyamg.smoothed_aggregation_solver(
            A_scaled.astype(np.float32),
            max_coarse=500,
            presmoother=("gauss_seidel", {"sweep": "forward"}),
            postsmoother=("gauss_seidel", {"sweep": "backward"}),
        )
        cache["amg"] = ml.aspreconditioner(cycle="V")
    return cache["amg"]


def assemble(cg: ConductivityGrid, dirichlet: DirichletSet,
             preconditioner: str = "auto") -> LinearSystem:
    """Linear system for one set of fixed-potential constraints.

    The operator is shared across calls on the same grid; only the constraint
    bookkeeping is per-dipole.
    """
    if dirichlet.indices.size == 0:
        raise SingularSystemError("at least one fixed-potential cell is required")
    A_scaled, diag, dsq = build_operator(cg)
    n = diag.size
    if preconditioner == "auto":
        preconditioner = "amg" if n > _AMG_THRESHOLD else "jacobi"
    if preconditioner == "amg":
        amg = _build_amg(cg)

        def M(r, _amg=amg):
            return np.asarray(_amg(r.astype(np.float32)), dtype=np.float64)
    elif preconditioner == "jacobi":
        M = None  # diagonal of the scaled operator is 1
    else:
        raise ValueError(f"unknown preconditioner {preconditioner!r}")
    return LinearSystem(A_scaled, diag, dsq, dirichlet, M, n)


def _dot(a, b) -> float:
    # pairwise summation: deterministic and independent of thread count
    return float(np.sum(a * b))


def solve(system: LinearSystem, rel_tol: float = 1e-8,
          max_iter: int = 4000) -> PotentialField:
    """Projected PCG on the scaled operator.

    Constrained cells hold their imposed values exactly; convergence is
    measured on the unscaled residual relative to the unscaled load.
    """
    A = system.A_scaled
    dsq = system.dsq
    cons = system.dirichlet.indices
    n = system.n

    # x = Dh xs with xs[cons] fixed at v / dsq
    vhat_s = np.zeros(n)
    vhat_s[cons] = system.dirichlet.values / dsq[cons]
    b = -(A @ vhat_s)
    b[cons] = 0.0
    w = 1.0 / dsq  # unscaled residual weight: r_unscaled = w * r_scaled
    bnorm = math.sqrt(_dot(b * w, b * w))
    if bnorm == 0.0:
        xs = vhat_s
        return PotentialField(xs * dsq, 0, 0.0)

    def apply_op(p):
        y = A @ p
        y[cons] = p[cons]
        return y

    def precondition(r):
        if system.preconditioner is None:
            z = r.copy()
        else:
            z = system.preconditioner(r)
        z[cons] = 0.0
        return z

    x = np.zeros(n)
    r = b.copy()
    z = precondition(r)
    p = z.copy()
    rz = _dot(r, z)
    history = []
    it = 0
    while True:
        Ap = apply_op(p)
        pAp = _dot(p, Ap)
        if pAp <= 0.0:
            raise ConvergenceError("operator lost positive definiteness", history)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        it += 1
        rel = math.sqrt(_dot(r * w, r * w)) / bnorm
        history.append(rel)
        if rel <= rel_tol:
            break
        if it >= max_iter:
            raise ConvergenceError(
                f"no convergence in {max_iter} iterations (residual {rel:.3e})",
                history)
        z = precondition(r)
        rz_new = _dot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    xs = x + vhat_s
    xs[cons] = vhat_s[cons]  # exact imposed values
    return PotentialField(xs * dsq, it, history[-1] if history else 0.0)


# ---------------------------------------------------------------------------
# Electrode readings and the lead table
# ---------------------------------------------------------------------------


def electrode_potential(field: PotentialField, cg: ConductivityGrid,
                        electrode_id: str) -> ElectrodeReading:
    """Cell-volume-weighted mean potential over the electrode's metal cells,
    with the max-min spread as an equipotentiality diagnostic."""
    cells = cg.electrode_cells.get(electrode_id)
    if cells is None or cells.size == 0:
        raise EmptyElectrodeError(f"electrode {electrode_id!r} has no metal cells")
    vols = cg.grid.cell_volumes().reshape(-1)[cells]
    vals = field.values[cells]
    mean = float(np.sum(vals * vols) / np.sum(vols))
    spread = float(np.max(vals) - np.min(vals)) if vals.size > 1 else 0.0
    return ElectrodeReading(mean, spread)


def _dipole_metadata(scene: Scene, dipole, electrode_id: str):
    pe = scene.electrodes[electrode_id]
    pos = dipole.position_array()
    d = pe.sensing_centroid - pos
    dist = float(np.linalg.norm(d))
    cosang = float(np.clip(d @ dipole.orientation_array() / dist, -1.0, 1.0))
    return dist, math.degrees(math.acos(cosang))


@dataclass
class SolveRecord:
    dipole_key: tuple
    iterations: int
    rel_residual: float
    readings: dict  # electrode id -> ElectrodeReading


_POOL_STATE: dict = {}


def _solve_one_dipole(args):
    key, pair = args
    cg = _POOL_STATE["cg"]
    opts = _POOL_STATE["opts"]
    dirichlet = impose_sources(cg, [pair])
    system = assemble(cg, dirichlet, preconditioner=opts["preconditioner"])
    try:
        fld = solve(system, rel_tol=opts["rel_tol"], max_iter=opts["max_iter"])
    except ConvergenceError as exc:
        raise ConvergenceError(f"dipole at {key}: {exc}", exc.residual_history) from exc
    readings = {eid: electrode_potential(fld, cg, eid) for eid in cg.electrode_cells}
    return SolveRecord(key, fld.iterations, fld.rel_residual, readings)


def solve_dipoles(cg: ConductivityGrid, unique_pairs: dict,
                  rel_tol=1e-8, max_iter=4000, preconditioner="auto",
                  workers: int = 1, log=None) -> dict:
    """Solve each unique dipole's field; returns key -> SolveRecord.

    Results are keyed, so output is independent of worker count and ordering.
    """
    opts = {"rel_tol": rel_tol, "max_iter": max_iter, "preconditioner": preconditioner}
    items = sorted(unique_pairs.items())
    # warm the operator/preconditioner caches before forking
    if items:
        build_operator(cg)
        if preconditioner == "amg" or (preconditioner == "auto" and cg.sigma.size > _AMG_THRESHOLD):
            _build_amg(cg)
    records = {}
    if workers <= 1 or len(items) <= 1:
        _POOL_STATE.update(cg=cg, opts=opts)
        for item in items:
            rec = _solve_one_dipole(item)
            records[rec.dipole_key] = rec
            if log is not None:
                log(rec)
    else:
        import multiprocessing as mp

        _POOL_STATE.update(cg=cg, opts=opts)
        ctx = mp.get_context("fork")
        with ctx.Pool(processes=workers) as pool:
            for rec in pool.imap_unordered(_solve_one_dipole, items, chunksize=1):
                records[rec.dipole_key] = rec
                if log is not None:
                    log(rec)
    return records


def lead_table(cg: ConductivityGrid, scene: Scene, source_sets,
               return_id: str = "return", rel_tol: float = 1e-8,
               max_iter: int = 4000, preconditioner: str = "auto",
               workers: int = 1, log=None) -> LeadTable:
    """Static recorded potential per (electrode, dipole, distribution).

    One direct solve per unique dipole position (the shared central dipole is
    solved once); the lead is the recording electrode's passive potential
    minus the return electrode's.
    """
    if isinstance(source_sets, SourceSet):
        source_sets = [source_sets]
    electrode_ids = [eid for eid in cg.electrode_cells if eid != return_id]

    unique = {}
    for ss in source_sets:
        for pair, dip in zip(ss.pairs, ss.dipoles):
            unique.setdefault(dip.position, pair)
    records = solve_dipoles(cg, unique, rel_tol, max_iter, preconditioner,
                            workers=workers, log=log)

    rows = []
    for ss in source_sets:
        for di, dip in enumerate(ss.dipoles):
            rec = records[dip.position]
            ref = rec.readings[return_id].mean
            for eid in electrode_ids:
                dist, ang = _dipole_metadata(scene, dip, eid)
                rows.append(LeadRow(eid, di, ss.distribution_index,
                                    rec.readings[eid].mean - ref, dist, ang))
    return LeadTable(rows)


# ---------------------------------------------------------------------------
# Reciprocity accelerator
# ---------------------------------------------------------------------------


def _injection_field(cg: ConductivityGrid, electrode_id: str, return_id: str,
                     rel_tol=1e-8, max_iter=4000, preconditioner="auto") -> PotentialField:
    """Field for 1 A injected through the electrode and extracted at the return,
    both spread volume-weighted over their metal cells; grounded at cell 0."""
    cache = _grid_cache(cg).setdefault("injection", {})
    key = (electrode_id, return_id, rel_tol)
    if key in cache:
        return cache[key]
    A_scaled, diag, dsq = build_operator(cg)
    n = diag.size
    f = np.zeros(n)
    vols = cg.grid.cell_volumes().reshape(-1)
    for eid, sign in ((electrode_id, 1.0), (return_id, -1.0)):
        cells = cg.electrode_cells.get(eid)
        if cells is None or cells.size == 0:
            raise EmptyElectrodeError(f"electrode {eid!r} has no metal cells")
        wv = vols[cells] / np.sum(vols[cells])
        f[cells] += sign * wv

    ground = np.array([0], dtype=np.int64)  # corner cell, bulk margin
    dirichlet = DirichletSet(ground, np.zeros(1), [])
    system = assemble(cg, dirichlet, preconditioner=preconditioner)

    # same machinery as solve(), but with a current load instead of eliminated values
    A = system.A_scaled
    cons = ground
    b = f * dsq  # scaled RHS
    b[cons] = 0.0
    w = 1.0 / dsq
    bnorm = math.sqrt(_dot(b * w, b * w))
    x = np.zeros(n)
    r = b.copy()

    def precondition(r):
        z = r.copy() if system.preconditioner is None else system.preconditioner(r)
        z[cons] = 0.0
        return z

    z = precondition(r)
    p = z.copy()
    rz = _dot(r, z)
    history = []
    it = 0
    while True:
        Ap = A @ p
        Ap[cons] = p[cons]
        alpha = rz / _dot(p, Ap)
        x += alpha * p
        r -= alpha * Ap
        it += 1
        rel = math.sqrt(_dot(r * w, r * w)) / bnorm
        history.append(rel)
        if rel <= rel_tol:
            break
        if it >= max_iter:
            raise ConvergenceError(f"injection solve stalled at {rel:.3e}", history)
        z = precondition(r)
        rz_new = _dot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    fld = PotentialField(x * dsq, it, history[-1])
    cache[key] = fld
    return fld


def reciprocal_lead(cg: ConductivityGrid, electrode_id: str, source_set: SourceSet,
                    return_id: str = "return", rel_tol: float = 1e-8,
                    max_iter: int = 4000, preconditioner: str = "auto") -> np.ndarray:
    """Per-dipole lead estimate from one injection solve per electrode pair.

    By reciprocity the direct lead equals sum_c s_c * u(c) over the source's
    constrained cells, where u is the unit-current injection field and s_c the
    source reaction currents; s_c is estimated from calibrated local solves.
    """
    u = _injection_field(cg, electrode_id, return_id, rel_tol, max_iter, preconditioner)
    out = np.empty(len(source_set.dipoles))
    for i, pair in enumerate(source_set.pairs):
        dirichlet = impose_sources(cg, [pair])
        idx, cur = lattice.local_reaction_currents(cg, dirichlet)
        out[i] = float(np.sum(u.values[idx] * cur))
    return out
