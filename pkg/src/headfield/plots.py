"""Static SVG figures for run reports.

Rendering is deterministic: fixed hash salt, no embedded timestamps, groups
drawn in input order.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "headfield"


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def group_box(groups: dict, path, ylabel: str, title: str = "",
              log_scale: bool = False) -> None:
    """Box plot of named sample groups, one box per group in input order."""
    names = list(groups)
    fig, ax = plt.subplots(figsize=(max(6, 1.1 * len(names)), 4.2))
    ax.boxplot([groups[n] for n in names], tick_labels=names, whis=(0, 100))
    for i, n in enumerate(names):
        vals = np.asarray(groups[n], dtype=float)
        x = np.full(vals.size, i + 1.0)
        ax.plot(x, vals, "o", ms=3, alpha=0.6, color="tab:blue")
        med = float(np.median(vals))
        ax.annotate(f"{med:.3g}", (i + 1.18, med), fontsize=8, va="center")
    if log_scale:
        ax.set_yscale("log")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    _save(fig, path)


def lead_scatter(rows, path, x_field: str = "distance_m",
                 xlabel: str = "dipole-electrode distance (m)",
                 loglog: bool = True) -> None:
    """|static potential| against distance (or angle), one series per electrode."""
    byel = {}
    for r in rows:
        byel.setdefault(r.electrode, []).append(r)
    fig, ax = plt.subplots(figsize=(6.5, 4.5))
    vmax = max(abs(r.potential_v) for r in rows) or 1.0
    for eid, rs in byel.items():
        x = [getattr(r, x_field) for r in rs]
        y = [abs(r.potential_v) / vmax for r in rs]
        ax.plot(x, y, "o", ms=3, alpha=0.65, label=eid)
    if loglog:
        ax.set_xscale("log")
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("normalized |static potential|")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def waveform_panel(recordings, path) -> None:
    """Mean simulated waveform per electrode with a one-standard-deviation band."""
    if not recordings:
        return
    channels = recordings[0].channels
    t = recordings[0].params.times() * 1e3
    stack = np.stack([r.samples for r in recordings])  # (n_dist, n_ch, n_t)
    vmax = np.abs(stack).max() or 1.0
    stack = stack / vmax
    fig, ax = plt.subplots(figsize=(6.5, 4.5))
    for ci, ch in enumerate(channels):
        mean = stack[:, ci].mean(axis=0)
        std = stack[:, ci].std(axis=0)
        ax.plot(t, mean, label=ch, lw=1.2)
        ax.fill_between(t, mean - std, mean + std, alpha=0.2)
    ax.set_xlabel("time (ms)")
    ax.set_ylabel("normalized amplitude")
    ax.legend(fontsize=8, ncols=2)
    fig.tight_layout()
    _save(fig, path)


def spectrum_plot(curves: dict, path, threshold_by_name: dict | None = None) -> None:
    """Power spectra on log axes with optional per-curve noise-floor lines."""
    fig, ax = plt.subplots(figsize=(6.5, 4.5))
    for name, (f, p) in curves.items():
        sel = f > 0
        ax.semilogy(f[sel], p[sel], lw=1.0, label=name)
        if threshold_by_name and name in threshold_by_name:
            ax.axhline(threshold_by_name[name], ls="--", lw=0.8, alpha=0.6)
    ax.set_xlabel("frequency (Hz)")
    ax.set_ylabel("power (V$^2$/Hz)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)
