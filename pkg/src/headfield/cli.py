"""Batch command-line front end.

Subcommands: ``model build``, ``sim run``, ``analyze snr``, ``analyze
bandwidth``, ``stats compare``, ``report``.  Every command resolves its
configuration, takes an exclusive lock on the output directory, writes its
artifacts, and records them (with content hashes) in the run manifest.
Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, config as cfgmod, headmodel, recordings, solver, sources, synth
from .config import ConfigError, LockError, OutputLock, ScenarioConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

_CONFIG_ERRORS = (
    ConfigError,
    headmodel.NestingError,
    headmodel.OverlapError,
    headmodel.BudgetError,
    sources.RegionError,
)
_NUMERIC_ERRORS = (
    solver.ConvergenceError,
    solver.SingularSystemError,
    solver.EmptyElectrodeError,
    sources.ResolutionError,
    sources.SingularityError,
    analysis.ZeroVarianceError,
    analysis.BandError,
    analysis.LengthError,
)
_IO_ERRORS = (
    recordings.FormatError,
    analysis.NoTriggerError,
    LockError,
    FileNotFoundError,
    OSError,
)


def _info(msg):
    print(msg, file=sys.stderr)


def _load_scenario(args) -> ScenarioConfig:
    cfg = cfgmod.load_config_file(args.config) if args.config else ScenarioConfig()
    if getattr(args, "preset", None):
        cfg.preset = args.preset
        if cfg.preset not in headmodel.PRESETS:
            raise ConfigError("--preset", f"must be one of {sorted(headmodel.PRESETS)}")
    if getattr(args, "seed", None) is not None:
        cfg.sources.seeds = [args.seed + i for i in range(cfg.sources.n_distributions)]
    return cfg


def _build_model(cfg: ScenarioConfig):
    scene = headmodel.build_scene(cfg.geometry, cfg.electrodes)
    grid = headmodel.make_grid(cfg.geometry, scene, cfg.preset,
                               cell_budget=cfg.cell_budget)
    nx, ny, nz = grid.dims
    _info(f"grid: {nx} x {ny} x {nz} = {grid.n_cells} cells")
    cg = headmodel.voxelate(scene, grid)
    return scene, grid, cg


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# model build
# ---------------------------------------------------------------------------


def cmd_model_build(args) -> int:
    cfg = _load_scenario(args)
    out = Path(args.out)
    with OutputLock(out):
        out.mkdir(parents=True, exist_ok=True)
        scene, grid, cg = _build_model(cfg)
        bin_path = out / "conductivity.bin"
        headmodel.write_conductivity_binary(cg, bin_path)
        counts = {headmodel.Tissue(t).name.lower(): int(c) for t, c in
                  zip(*np.unique(cg.tissue, return_counts=True))}
        summary = {
            "preset": cfg.preset,
            "dims": list(grid.dims),
            "n_cells": grid.n_cells,
            "tissue_cell_counts": counts,
            "electrode_cell_counts": {k: int(v.size) for k, v in cg.electrode_cells.items()},
        }
        sum_path = out / "model_summary.json"
        sum_path.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
        cfgmod.write_manifest(out, "model_build", cfg.to_dict(), [bin_path, sum_path])
        print(f"cells: {grid.n_cells}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sim run
# ---------------------------------------------------------------------------


def _sample_all(cfg: ScenarioConfig):
    sigma_gm = headmodel.default_tissue_table()[headmodel.Tissue.GREY_MATTER]
    sets = []
    for d, seed in enumerate(cfg.sources.resolved_seeds()):
        sets.append(sources.sample_dipoles(
            cfg.geometry, cfg.sources.n_dipoles, seed, distribution_index=d,
            moment=cfg.sources.moment, medium_sigma=sigma_gm))
    return sets


def run_simulation(cfg: ScenarioConfig, out: Path, workers: int = 1):
    """Full forward pipeline; returns (paths, lead_table, source_sets, recordings)."""
    out.mkdir(parents=True, exist_ok=True)
    scene, grid, cg = _build_model(cfg)
    source_sets = _sample_all(cfg)

    src_dir = out / "sources"
    src_dir.mkdir(exist_ok=True)
    paths = []
    for ss in source_sets:
        p = src_dir / f"dist_{ss.distribution_index:02d}.json"
        p.write_text(ss.to_json())
        paths.append(p)

    log_records = []
    total = len({d.position for ss in source_sets for d in ss.dipoles})

    def log(rec):
        log_records.append(rec)
        _info(f"solved dipole {len(log_records)}/{total}: "
              f"{rec.iterations} iterations, residual {rec.rel_residual:.2e}")

    table = solver.lead_table(cg, scene, source_sets,
                              rel_tol=cfg.solver.rel_tol,
                              max_iter=cfg.solver.max_iter,
                              preconditioner=cfg.solver.preconditioner,
                              workers=workers, log=log)
    leads_path = out / "leads.csv"
    table.to_csv(leads_path)
    paths.append(leads_path)

    log_path = out / "solve_log.jsonl"
    with open(log_path, "w") as f:
        for rec in sorted(log_records, key=lambda r: r.dipole_key):
            f.write(json.dumps({
                "dipole_position": list(rec.dipole_key),
                "iterations": rec.iterations,
                "rel_residual": rec.rel_residual,
            }) + "\n")
    paths.append(log_path)

    params = synth.EpspParams(cfg.epsp.tau_s, cfg.epsp.propagation_speed_m_s,
                              cfg.epsp.duration_s, cfg.epsp.sample_rate_hz)
    electrode_ids = [e.id for e in cfg.electrodes
                     if e.placement is not headmodel.Placement.RETURN]
    rec_dir = out / "recordings"
    rec_dir.mkdir(exist_ok=True)
    sims = []
    for ss in source_sets:
        rec = synth.synthesize_recording(table, ss, params, electrode_ids)
        sims.append(rec)
        p = rec_dir / f"sim_dist_{ss.distribution_index:02d}.rec"
        recordings.write_recording(p, rec.channels, rec.samples,
                                   params.sample_rate, triggers=[0.0])
        paths.append(p)
        paths.append(recordings.trigger_path(p))

    amp = synth.amplitude_table(sims)
    amp_path = out / "amplitudes.csv"
    _write_rows(amp_path, ["group", "channel", "value"],
                [[eid, d, _fmt(v)] for eid, vals in amp.items()
                 for d, v in enumerate(vals)])
    paths.append(amp_path)

    report = analysis.compare_groups(amp, alpha=cfg.analysis.alpha)
    anova_path = out / "amplitude_anova.json"
    anova_path.write_text(json.dumps({
        "F": report.anova_f, "df_between": report.df_between,
        "df_within": report.df_within, "p": report.anova_p,
    }, indent=1, sort_keys=True) + "\n")
    paths.append(anova_path)
    tukey_path = out / "amplitude_tukey.csv"
    _write_rows(tukey_path, ["groupA", "groupB", "diff", "p", "significant"],
                [[r.group_a, r.group_b, _fmt(r.diff), _fmt(r.p),
                  "yes" if r.significant else "no"] for r in report.tukey])
    paths.append(tukey_path)
    return paths, table, source_sets, sims


def cmd_sim_run(args) -> int:
    cfg = _load_scenario(args)
    out = Path(args.out)
    with OutputLock(out):
        paths, _, _, _ = run_simulation(cfg, out, workers=args.threads)
        cfgmod.write_manifest(out, "sim_run", cfg.to_dict(), paths)
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def cmd_analyze_snr(args) -> int:
    cfg = _load_scenario(args)
    out = Path(args.out)
    with OutputLock(out):
        out.mkdir(parents=True, exist_ok=True)
        chan_rows, trial_rows, box_rows = [], [], []
        for rec_path in args.recordings:
            rec = recordings.read_recording(rec_path)
            if rec.triggers.size == 0:
                raise analysis.NoTriggerError(
                    f"{rec_path}: no trigger file "
                    f"({recordings.trigger_path(rec_path).name}) or empty")
            name = Path(rec_path).stem
            results = {}
            for ch in rec.channels:
                r = analysis.vep_pipeline(rec, ch, n_trials=cfg.analysis.trial_count,
                                          seed=cfg.analysis.trial_seed)
                results[ch] = r
            top = analysis.select_top_channels(
                {c: results[c].snr_db for c in rec.channels},
                k=min(cfg.analysis.top_k, len(rec.channels)))
            for ch, r in results.items():
                chan_rows.append([name, ch, r.n_epochs, r.n_kept, r.n_used,
                                  _fmt(r.amplitude_uv), _fmt(r.median_snr_db),
                                  "yes" if ch in top else "no"])
            for ch in top:
                for i, v in enumerate(results[ch].snr_db):
                    trial_rows.append([name, ch, i, _fmt(v)])
                    box_rows.append([name, ch, _fmt(v)])
        p1 = out / "snr_channels.csv"
        _write_rows(p1, ["recording", "channel", "n_epochs", "n_kept", "n_used",
                         "amplitude_uv", "median_snr_db", "selected"], chan_rows)
        p2 = out / "snr_trials.csv"
        _write_rows(p2, ["recording", "channel", "trial", "snr_db"], trial_rows)
        p3 = out / "snr_boxdata.csv"
        _write_rows(p3, ["group", "channel", "value"], box_rows)
        cfgmod.write_manifest(out, "analyze_snr", cfg.to_dict(), [p1, p2, p3])
    return EXIT_OK


def cmd_analyze_bandwidth(args) -> int:
    cfg = _load_scenario(args)
    out = Path(args.out)
    with OutputLock(out):
        out.mkdir(parents=True, exist_ok=True)
        rows, box_rows = [], []
        for rec_path in args.recordings:
            rec = recordings.read_recording(rec_path)
            if rec.sample_rate < 2 * analysis.NOISE_FLOOR_BAND[1]:
                raise analysis.BandError(
                    f"{rec_path}: sample rate {rec.sample_rate} Hz cannot "
                    f"resolve the {analysis.NOISE_FLOOR_BAND[1]:.0f} Hz noise-floor band")
            name = Path(rec_path).stem
            for ch in rec.channels:
                psd = analysis.welch_psd(rec.channel(ch), rec.sample_rate)
                thr = analysis.noise_floor(psd, mains_hz=cfg.analysis.mains_hz)
                bw = analysis.max_bandwidth(psd, thr)
                rows.append([name, ch, _fmt(thr), _fmt(bw)])
                box_rows.append([name, ch, _fmt(bw)])
        p1 = out / "bandwidth.csv"
        _write_rows(p1, ["recording", "channel", "noise_floor_v2hz",
                         "max_bandwidth_hz"], rows)
        p2 = out / "bandwidth_boxdata.csv"
        _write_rows(p2, ["group", "channel", "value"], box_rows)
        cfgmod.write_manifest(out, "analyze_bandwidth", cfg.to_dict(), [p1, p2])
    return EXIT_OK


# ---------------------------------------------------------------------------
# stats compare
# ---------------------------------------------------------------------------


def _read_group_csv(path) -> dict:
    groups: dict[str, list] = {}
    with open(path, newline="") as f:
        rdr = csv.reader(f)
        header = next(rdr, None)
        if header is None:
            raise recordings.FormatError(f"{path}: empty file")
        cols = [c.strip().lower() for c in header]
        if "group" not in cols or "value" not in cols:
            raise recordings.FormatError(
                f"{path}: expected 'group' and 'value' columns, got {header}")
        gi, vi = cols.index("group"), cols.index("value")
        for ln, row in enumerate(rdr, start=2):
            if not row:
                continue
            try:
                groups.setdefault(row[gi], []).append(float(row[vi]))
            except (ValueError, IndexError) as exc:
                raise recordings.FormatError(f"{path}:{ln}: bad row {row}") from exc
    return groups


def cmd_stats_compare(args) -> int:
    cfg = _load_scenario(args)
    out = Path(args.out)
    with OutputLock(out):
        out.mkdir(parents=True, exist_ok=True)
        groups: dict[str, list] = {}
        for path in args.tables:
            for g, vals in _read_group_csv(path).items():
                groups.setdefault(g, []).extend(vals)
        report = analysis.compare_groups(groups, alpha=cfg.analysis.alpha)
        p1 = out / "compare_anova.json"
        p1.write_text(json.dumps({
            "F": report.anova_f, "df_between": report.df_between,
            "df_within": report.df_within, "p": report.anova_p,
            "alpha": report.alpha,
        }, indent=1, sort_keys=True) + "\n")
        p2 = out / "compare_tukey.csv"
        _write_rows(p2, ["groupA", "groupB", "diff", "p", "significant"],
                    [[r.group_a, r.group_b, _fmt(r.diff), _fmt(r.p),
                      "yes" if r.significant else "no"] for r in report.tukey])
        cfgmod.write_manifest(out, "stats_compare", cfg.to_dict(), [p1, p2])
    return EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def cmd_report(args) -> int:
    from . import plots

    run_dir = Path(args.run_dir)
    fig_dir = run_dir / "figures"
    expected = ["leads.csv", "amplitudes.csv", "snr_boxdata.csv",
                "bandwidth_boxdata.csv", "recordings/"]
    produced = []
    summary = ["# Run report", ""]

    leads_path = run_dir / "leads.csv"
    amp_path = run_dir / "amplitudes.csv"
    snr_path = run_dir / "snr_boxdata.csv"
    bw_path = run_dir / "bandwidth_boxdata.csv"
    rec_dir = run_dir / "recordings"
    if not any(p.exists() for p in (leads_path, amp_path, snr_path, bw_path)):
        _info(f"no report inputs in {run_dir}; expected any of: "
              + ", ".join(expected))
        return EXIT_IO
    fig_dir.mkdir(parents=True, exist_ok=True)

    if amp_path.exists():
        groups = _read_group_csv(amp_path)
        p = fig_dir / "amplitude_box.svg"
        plots.group_box(groups, p, "normalized peak-to-peak amplitude",
                        title="simulated waveform amplitudes")
        produced.append(p)
        meds = {g: float(np.median(v)) for g, v in groups.items()}
        summary.append("## Simulated amplitudes")
        summary.append("")
        summary.append("| group | median (normalized) | n |")
        summary.append("|---|---|---|")
        for g, v in groups.items():
            summary.append(f"| {g} | {meds[g]:.4f} | {len(v)} |")
        summary.append("")

    if leads_path.exists():
        rows = []
        with open(leads_path, newline="") as f:
            rdr = csv.DictReader(f)
            for d in rdr:
                rows.append(solver.LeadRow(d["electrode"], int(d["dipole"]),
                                           int(d["distribution"]),
                                           float(d["potential_v"]),
                                           float(d["distance_m"]),
                                           float(d["angle_deg"])))
        p = fig_dir / "potential_vs_distance.svg"
        plots.lead_scatter(rows, p)
        produced.append(p)
        p = fig_dir / "potential_vs_angle.svg"
        plots.lead_scatter(rows, p, x_field="angle_deg",
                           xlabel="dipole-electrode angle (deg)", loglog=False)
        produced.append(p)
        summary.append("## Lead table")
        summary.append("")
        summary.append(f"{len(rows)} (electrode, dipole) static potentials; "
                       "see potential_vs_distance.svg / potential_vs_angle.svg.")
        summary.append("")

    if rec_dir.is_dir():
        recs = []
        for p in sorted(rec_dir.glob("*.rec")):
            r = recordings.read_recording(p, with_triggers=False)
            params = synth.EpspParams(sample_rate=r.sample_rate,
                                      duration=r.samples.shape[1] / r.sample_rate)
            recs.append(synth.SimRecording(r.channels, r.samples, params, len(recs)))
        if recs:
            p = fig_dir / "simulated_waveforms.svg"
            plots.waveform_panel(recs, p)
            produced.append(p)

    for path, name, label in ((snr_path, "snr_box.svg", "per-trial SNR (dB)"),
                              (bw_path, "bandwidth_box.svg", "max bandwidth (Hz)")):
        if path.exists():
            groups = _read_group_csv(path)
            p = fig_dir / name
            plots.group_box(groups, p, label)
            produced.append(p)

    md = run_dir / "report.md"
    summary.append("## Figures")
    summary.append("")
    for p in produced:
        summary.append(f"- figures/{p.name}")
    md.write_text("\n".join(summary) + "\n")
    produced.append(md)
    cfgmod.write_manifest(run_dir, "report", {"run_dir": str(run_dir)}, produced)
    print(f"report: {md}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="headfield",
        description="Layered-head volume-conduction simulator and EEG "
                    "signal-quality analysis")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", type=str, default=None, help="scenario JSON")
        p.add_argument("--seed", type=int, default=None, help="override base seed")
        p.add_argument("--preset", choices=sorted(headmodel.PRESETS), default=None)
        p.add_argument("--threads", type=int, default=1,
                       help="worker processes for dipole solves")
        if out:
            p.add_argument("--out", type=str, required=True, help="output directory")

    p_model = sub.add_parser("model", help="head model commands")
    sub_model = p_model.add_subparsers(dest="subcommand", required=True)
    p = sub_model.add_parser("build", help="build and export the conductivity grid")
    common(p)
    p.set_defaults(func=cmd_model_build)

    p_sim = sub.add_parser("sim", help="forward simulation commands")
    sub_sim = p_sim.add_subparsers(dest="subcommand", required=True)
    p = sub_sim.add_parser("run", help="lead table, simulated recordings, amplitude stats")
    common(p)
    p.set_defaults(func=cmd_sim_run)

    p_an = sub.add_parser("analyze", help="signal-quality analysis of recordings")
    sub_an = p_an.add_subparsers(dest="subcommand", required=True)
    p = sub_an.add_parser("snr", help="evoked amplitude and per-trial SNR")
    p.add_argument("recordings", nargs="+", help="recording files (.rec)")
    common(p)
    p.set_defaults(func=cmd_analyze_snr)
    p = sub_an.add_parser("bandwidth", help="noise floor and maximum bandwidth")
    p.add_argument("recordings", nargs="+", help="background recording files (.rec)")
    common(p)
    p.set_defaults(func=cmd_analyze_bandwidth)

    p_stats = sub.add_parser("stats", help="statistical comparisons")
    sub_stats = p_stats.add_subparsers(dest="subcommand", required=True)
    p = sub_stats.add_parser("compare", help="one-way ANOVA + Tukey HSD over group CSVs")
    p.add_argument("tables", nargs="+", help="CSV files with group,value columns")
    common(p)
    p.set_defaults(func=cmd_stats_compare)

    p_rep = sub.add_parser("report", help="render figures and a markdown summary")
    p_rep.add_argument("run_dir", help="directory holding run artifacts")
    p_rep.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except _CONFIG_ERRORS as exc:
        _info(f"configuration error: {exc}")
        return EXIT_CONFIG
    except _NUMERIC_ERRORS as exc:
        _info(f"numeric failure: {exc}")
        return EXIT_NUMERIC
    except _IO_ERRORS as exc:
        _info(f"i/o error: {exc}")
        return EXIT_IO


def main_entry() -> None:  # console-script entry point
    sys.exit(main())
