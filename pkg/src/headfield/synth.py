"""Simulated recordings: latency-dispersed EPSP decays scaled by static leads.

Each dipole contributes a causal exponential decay (unit peak), delayed in
proportion to its x-coordinate, scaled by its static recorded potential, and
summed.  Waveforms are quantized to the recording-file storage precision
(float32) at creation so in-memory analysis and file round-trips agree bit
for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MismatchError(ValueError):
    """Lead rows and latencies cover different dipole sets."""


@dataclass(frozen=True)
class EpspParams:
    tau: float = 0.010               # s
    propagation_speed: float = 0.3   # m/s
    duration: float = 0.100          # s
    sample_rate: float = 1024.0      # Hz

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.duration < 5.0 * self.tau:
            raise ValueError("duration must cover at least 5 time constants")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))

    def times(self) -> np.ndarray:
        return np.arange(self.n_samples) / self.sample_rate


@dataclass
class SimRecording:
    """One distribution's simulated multichannel recording."""

    channels: list            # electrode ids
    samples: np.ndarray       # (n_channels, n_samples), volts
    params: EpspParams
    distribution_index: int


def epsp_kernel(t, params: EpspParams):
    """Unit-peak causal exponential decay: 0 for t < 0, exp(-t/tau) after."""
    t = np.asarray(t, dtype=float)
    out = np.where(t < 0.0, 0.0, np.exp(-np.maximum(t, 0.0) / params.tau))
    return out if out.ndim else float(out)


def latencies(source_set, params: EpspParams) -> np.ndarray:
    """Per-dipole delay, linear in x with the slowest dipole at zero delay."""
    xs = np.array([d.position[0] for d in source_set.dipoles])
    if xs.size == 0:
        raise ValueError("source set has no dipoles")
    return (xs - xs.min()) / params.propagation_speed


def synthesize(potentials, delays, params: EpspParams) -> np.ndarray:
    """Superpose delayed kernels scaled by each dipole's static potential."""
    potentials = np.asarray(potentials, dtype=float)
    delays = np.asarray(delays, dtype=float)
    if potentials.shape != delays.shape:
        raise MismatchError(
            f"{potentials.size} potentials vs {delays.size} latencies")
    t = params.times()
    w = np.zeros(t.size)
    for a, d in zip(potentials, delays):
        w += a * epsp_kernel(t - d, params)
    return w


def synthesize_recording(lead_table, source_set, params: EpspParams,
                         electrode_ids) -> SimRecording:
    """Simulated recording for one dipole distribution across electrodes."""
    delays = latencies(source_set, params)
    di = source_set.distribution_index
    chans = []
    for eid in electrode_ids:
        rows = [r for r in lead_table.rows
                if r.electrode == eid and r.distribution == di]
        rows.sort(key=lambda r: r.dipole)
        if len(rows) != len(source_set.dipoles):
            raise MismatchError(
                f"{eid}: {len(rows)} lead rows for {len(source_set.dipoles)} dipoles")
        chans.append(synthesize([r.potential_v for r in rows], delays, params))
    # quantize to the storage precision so in-memory metrics match a file
    # round trip bit for bit; analysis itself stays float64
    samples = np.stack(chans).astype(np.float32).astype(np.float64)
    return SimRecording(list(electrode_ids), samples, params, di)


def peak_to_peak(w) -> float:
    w = np.asarray(w)
    return float(np.max(w) - np.min(w))


def amplitude_table(recordings) -> dict:
    """Peak-to-peak amplitude per electrode per distribution, normalized so the
    largest group median is 1."""
    groups: dict[str, list[float]] = {}
    for rec in recordings:
        for ch, w in zip(rec.channels, rec.samples):
            groups.setdefault(ch, []).append(peak_to_peak(w))
    norm = max(float(np.median(v)) for v in groups.values())
    if norm == 0.0:
        norm = 1.0
    return {ch: [v / norm for v in vals] for ch, vals in groups.items()}
