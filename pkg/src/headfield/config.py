"""Scenario configuration, run manifests, and the output-directory lock.

A scenario is one JSON document with a ``version`` field; every run echoes
the fully resolved configuration into ``manifest.json`` together with a
content hash of each output file, so identical configurations reproduce
byte-identical artifacts.  Seeds are always explicit values, never clocks.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .headmodel import (
    DEFAULT_LAYER_THICKNESSES,
    ElectrodeShape,
    ElectrodeSpec,
    GeometrySpec,
    PatchSpec,
    Placement,
    PRESETS,
    VesselSpec,
    default_electrodes,
)

CONFIG_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


class LockError(RuntimeError):
    pass


@dataclass
class SourcesConfig:
    n_dipoles: int = 50
    n_distributions: int = 5
    seeds: list = field(default_factory=list)  # resolved to explicit values
    moment: float = 1.0e-6

    def resolved_seeds(self):
        if self.seeds:
            return list(self.seeds)
        return [1001 + i for i in range(self.n_distributions)]


@dataclass
class EpspConfig:
    tau_s: float = 0.010
    propagation_speed_m_s: float = 0.3
    duration_s: float = 0.100
    sample_rate_hz: float = 1024.0


@dataclass
class AnalysisConfig:
    mains_hz: float = 50.0
    alpha: float = 0.01
    trial_count: int = 50
    top_k: int = 2
    trial_seed: int = 7


@dataclass
class SolverConfig:
    rel_tol: float = 1.0e-8
    max_iter: int = 4000
    preconditioner: str = "auto"


@dataclass
class ScenarioConfig:
    version: int = CONFIG_VERSION
    preset: str = "desk"
    geometry: GeometrySpec = field(default_factory=GeometrySpec)
    electrodes: list = field(default_factory=default_electrodes)
    sources: SourcesConfig = field(default_factory=SourcesConfig)
    epsp: EpspConfig = field(default_factory=EpspConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    cell_budget: float | None = None

    def to_dict(self) -> dict:
        g = self.geometry
        return {
            "version": self.version,
            "preset": self.preset,
            "geometry": {
                "head_radius": g.head_radius,
                "brain_semi_axes": list(g.brain_semi_axes),
                "grey_matter_thickness": g.grey_matter_thickness,
                "layer_thicknesses": dict(g.layer_thicknesses),
                "vessel": asdict(g.vessel) if g.vessel is not None else None,
                "cortex_patch": {
                    "diameter": g.cortex_patch.diameter,
                    "center_xy": list(g.cortex_patch.center_xy),
                },
            },
            "electrodes": [
                {
                    "id": e.id,
                    "shape": e.shape.value,
                    "placement": e.placement.value,
                    "diameter": e.resolved_diameter(),
                    "orientation_deg": e.orientation_deg,
                    "backing_thickness": e.backing_thickness,
                    "metal_thickness": e.metal_thickness,
                    "peg_depth": e.peg_depth,
                }
                for e in self.electrodes
            ],
            "sources": {
                "n_dipoles": self.sources.n_dipoles,
                "n_distributions": self.sources.n_distributions,
                "seeds": self.sources.resolved_seeds(),
                "moment": self.sources.moment,
            },
            "epsp": asdict(self.epsp),
            "analysis": asdict(self.analysis),
            "solver": asdict(self.solver),
            "cell_budget": self.cell_budget,
        }


def _expect(d, key, types, path, default=None, required=False):
    if key not in d:
        if required:
            raise ConfigError(f"{path}.{key}", "missing required field")
        return default
    v = d[key]
    if not isinstance(v, types):
        tn = types.__name__ if isinstance(types, type) else "/".join(t.__name__ for t in types)
        raise ConfigError(f"{path}.{key}", f"expected {tn}, got {type(v).__name__}")
    return v


def _positive(v, path):
    if v is not None and v <= 0:
        raise ConfigError(path, "must be positive")
    return v


def load_config(data) -> ScenarioConfig:
    """Build a ScenarioConfig from a parsed JSON document, validating field by field."""
    if not isinstance(data, dict):
        raise ConfigError("$", "configuration must be a JSON object")
    version = _expect(data, "version", int, "$", default=CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError("$.version", f"unsupported version {version}")
    known = {"version", "preset", "geometry", "electrodes", "sources", "epsp",
             "analysis", "solver", "cell_budget"}
    for k in data:
        if k not in known:
            raise ConfigError(f"$.{k}", "unknown field")
    preset = _expect(data, "preset", str, "$", default="desk")
    if preset not in PRESETS:
        raise ConfigError("$.preset", f"must be one of {sorted(PRESETS)}")

    cfg = ScenarioConfig(version=version, preset=preset)

    g = _expect(data, "geometry", dict, "$", default={})
    if g:
        geo_kwargs = {}
        for key in ("head_radius", "grey_matter_thickness"):
            v = _expect(g, key, (int, float), "$.geometry")
            if v is not None:
                geo_kwargs[key] = _positive(float(v), f"$.geometry.{key}")
        axes = _expect(g, "brain_semi_axes", list, "$.geometry")
        if axes is not None:
            if len(axes) != 3 or not all(isinstance(a, (int, float)) and a > 0 for a in axes):
                raise ConfigError("$.geometry.brain_semi_axes", "expected 3 positive numbers")
            geo_kwargs["brain_semi_axes"] = tuple(float(a) for a in axes)
        lt = _expect(g, "layer_thicknesses", dict, "$.geometry")
        if lt is not None:
            merged = dict(DEFAULT_LAYER_THICKNESSES)
            for k, v in lt.items():
                if k not in merged:
                    raise ConfigError(f"$.geometry.layer_thicknesses.{k}", "unknown shell")
                if not isinstance(v, (int, float)) or v <= 0:
                    raise ConfigError(f"$.geometry.layer_thicknesses.{k}", "must be positive")
                merged[k] = float(v)
            geo_kwargs["layer_thicknesses"] = merged
        if "vessel" in g and g["vessel"] is None:
            geo_kwargs["vessel"] = None
        else:
            vd = _expect(g, "vessel", dict, "$.geometry")
            if vd is not None:
                vk = {}
                for k in ("lumen_diameter", "wall_thickness", "center_offset", "half_length"):
                    v = _expect(vd, k, (int, float), "$.geometry.vessel")
                    if v is not None:
                        vk[k] = _positive(float(v), f"$.geometry.vessel.{k}")
                geo_kwargs["vessel"] = VesselSpec(**vk)
        pd = _expect(g, "cortex_patch", dict, "$.geometry")
        if pd is not None:
            pk = {}
            v = _expect(pd, "diameter", (int, float), "$.geometry.cortex_patch")
            if v is not None:
                pk["diameter"] = _positive(float(v), "$.geometry.cortex_patch.diameter")
            c = _expect(pd, "center_xy", list, "$.geometry.cortex_patch")
            if c is not None:
                if len(c) != 2:
                    raise ConfigError("$.geometry.cortex_patch.center_xy", "expected 2 numbers")
                pk["center_xy"] = (float(c[0]), float(c[1]))
            geo_kwargs["cortex_patch"] = PatchSpec(**pk)
        cfg.geometry = GeometrySpec(**geo_kwargs)

    els = _expect(data, "electrodes", list, "$")
    if els is not None:
        specs = []
        for i, e in enumerate(els):
            p = f"$.electrodes[{i}]"
            if not isinstance(e, dict):
                raise ConfigError(p, "expected an object")
            eid = _expect(e, "id", str, p, required=True)
            try:
                shape = ElectrodeShape(_expect(e, "shape", str, p, required=True))
            except ValueError:
                raise ConfigError(f"{p}.shape",
                                  f"must be one of {[s.value for s in ElectrodeShape]}")
            try:
                placement = Placement(_expect(e, "placement", str, p, required=True))
            except ValueError:
                raise ConfigError(f"{p}.placement",
                                  f"must be one of {[s.value for s in Placement]}")
            kwargs = {}
            for k in ("diameter", "orientation_deg", "backing_thickness",
                      "metal_thickness", "peg_depth"):
                v = _expect(e, k, (int, float), p)
                if v is not None:
                    kwargs[k] = float(v)
            if placement is Placement.ENDOVASCULAR and \
                    kwargs.get("orientation_deg", 0.0) not in (0.0, 90.0, 180.0):
                raise ConfigError(f"{p}.orientation_deg", "must be 0, 90, or 180")
            specs.append(ElectrodeSpec(eid, shape, placement, **kwargs))
        if len({s.id for s in specs}) != len(specs):
            raise ConfigError("$.electrodes", "electrode ids must be unique")
        cfg.electrodes = specs

    s = _expect(data, "sources", dict, "$", default={})
    if s:
        sc = SourcesConfig()
        v = _expect(s, "n_dipoles", int, "$.sources")
        if v is not None:
            sc.n_dipoles = int(_positive(v, "$.sources.n_dipoles"))
        v = _expect(s, "n_distributions", int, "$.sources")
        if v is not None:
            sc.n_distributions = int(_positive(v, "$.sources.n_distributions"))
        v = _expect(s, "seeds", list, "$.sources")
        if v is not None:
            if not all(isinstance(x, int) for x in v):
                raise ConfigError("$.sources.seeds", "expected integers")
            sc.seeds = list(v)
        v = _expect(s, "moment", (int, float), "$.sources")
        if v is not None:
            sc.moment = _positive(float(v), "$.sources.moment")
        if sc.seeds and len(sc.seeds) != sc.n_distributions:
            raise ConfigError("$.sources.seeds",
                              f"expected {sc.n_distributions} seeds, got {len(sc.seeds)}")
        cfg.sources = sc

    e = _expect(data, "epsp", dict, "$", default={})
    if e:
        ec = EpspConfig()
        for k in ("tau_s", "propagation_speed_m_s", "duration_s", "sample_rate_hz"):
            v = _expect(e, k, (int, float), "$.epsp")
            if v is not None:
                setattr(ec, k, _positive(float(v), f"$.epsp.{k}"))
        cfg.epsp = ec

    a = _expect(data, "analysis", dict, "$", default={})
    if a:
        ac = AnalysisConfig()
        for k, ty in (("mains_hz", (int, float)), ("alpha", (int, float)),
                      ("trial_count", int), ("top_k", int), ("trial_seed", int)):
            v = _expect(a, k, ty, "$.analysis")
            if v is not None:
                if k != "trial_seed":
                    _positive(v, f"$.analysis.{k}")
                setattr(ac, k, v if isinstance(v, int) else float(v))
        if not 0 < ac.alpha < 1:
            raise ConfigError("$.analysis.alpha", "must be in (0, 1)")
        cfg.analysis = ac

    so = _expect(data, "solver", dict, "$", default={})
    if so:
        sv = SolverConfig()
        v = _expect(so, "rel_tol", (int, float), "$.solver")
        if v is not None:
            sv.rel_tol = _positive(float(v), "$.solver.rel_tol")
        v = _expect(so, "max_iter", int, "$.solver")
        if v is not None:
            sv.max_iter = int(_positive(v, "$.solver.max_iter"))
        v = _expect(so, "preconditioner", str, "$.solver")
        if v is not None:
            if v not in ("auto", "amg", "jacobi"):
                raise ConfigError("$.solver.preconditioner", "must be auto, amg, or jacobi")
            sv.preconditioner = v
        cfg.solver = sv

    v = _expect(data, "cell_budget", (int, float), "$")
    if v is not None:
        cfg.cell_budget = _positive(float(v), "$.cell_budget")
    return cfg


def load_config_file(path) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("$", f"cannot read {path}: {exc}")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("$", f"invalid JSON in {path}: {exc}")
    return load_config(data)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command: str, config_dict: dict, outputs) -> Path:
    """Record (or update) the run manifest: resolved config + output hashes.

    Deterministic content: no timestamps, sorted keys, repeatable hashing.
    """
    out_dir = Path(out_dir)
    path = out_dir / "manifest.json"
    manifest = {"version": CONFIG_VERSION, "commands": {}}
    if path.exists():
        try:
            manifest = json.loads(path.read_text())
        except json.JSONDecodeError:
            pass
        manifest.setdefault("commands", {})
    entry = {
        "config": config_dict,
        "outputs": {
            str(Path(p).relative_to(out_dir)): file_sha256(p) for p in outputs
        },
    }
    manifest["commands"][command] = entry
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# Output-directory lock
# ---------------------------------------------------------------------------


class OutputLock:
    """Exclusive lock file; concurrent commands on one directory are rejected."""

    def __init__(self, out_dir):
        self.path = Path(out_dir) / ".headfield.lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockError(
                f"output directory is locked by another run ({self.path}); "
                "remove the lock file if that run is dead")
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass
        return False
