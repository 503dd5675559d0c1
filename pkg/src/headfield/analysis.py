"""Signal-quality metrics: evoked-response amplitude/SNR, spectral bandwidth,
and the one-way ANOVA / Tukey HSD comparisons.

The evoked-response path mirrors a standard flash-stimulus protocol: zero-
phase 5-40 Hz bandpass, epoching about triggers, 1 mV range-based artifact
rejection, random trial subsampling, then peak-to-peak amplitude of the
trial average and per-trial variance-ratio SNR.  The bandwidth path estimates
a noise floor from the 400-500 Hz band (mains harmonics excluded) and scans
10 Hz bins of median Welch power.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps
from scipy import stats as scistats


class LengthError(ValueError):
    """Signal too short for the requested operation."""


class NoTriggerError(ValueError):
    """No usable trigger in the recording."""


class ZeroVarianceError(ValueError):
    """A pre-stimulus window has zero variance."""


class BandError(ValueError):
    """PSD does not cover the required frequency band."""


# epoch window relative to the trigger
EPOCH_PRE_S = 0.300
EPOCH_POST_S = 0.800
SNR_WINDOW_S = 0.300
ARTIFACT_RANGE_V = 1.0e-3
PASSBAND_HZ = (5.0, 40.0)
STOPBAND_HZ = (3.5, 48.0)
STOP_ATTEN_DB = 70.0  # design margin over the 60 dB requirement


@dataclass
class Recording:
    channels: list
    samples: np.ndarray      # (n_channels, n_samples), volts
    sample_rate: float
    triggers: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        self.triggers = np.sort(np.asarray(self.triggers, dtype=float))
        if len(self.channels) != self.samples.shape[0]:
            raise ValueError("channel names do not match sample rows")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        dur = self.samples.shape[1] / self.sample_rate
        if self.triggers.size and (self.triggers[0] < 0 or self.triggers[-1] > dur):
            raise ValueError("triggers outside the recording duration")

    def channel(self, name: str) -> np.ndarray:
        return self.samples[self.channels.index(name)]

    @property
    def duration(self) -> float:
        return self.samples.shape[1] / self.sample_rate


@dataclass
class EpochSet:
    epochs: np.ndarray       # (n_epochs, n_samples)
    kept: np.ndarray         # bool per epoch
    sample_rate: float
    n_pre: int               # samples before the trigger
    dropped_triggers: int = 0

    @property
    def kept_epochs(self) -> np.ndarray:
        return self.epochs[self.kept]

    @property
    def n_post(self) -> int:
        return self.epochs.shape[1] - self.n_pre


@dataclass
class Psd:
    frequencies: np.ndarray
    power: np.ndarray        # V^2/Hz, one-sided


@dataclass
class TukeyRow:
    group_a: str
    group_b: str
    diff: float              # mean(A) - mean(B)
    p: float
    significant: bool


@dataclass
class ComparisonReport:
    groups: dict             # name -> samples
    anova_f: float
    df_between: int
    df_within: int
    anova_p: float
    tukey: list
    alpha: float


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------


def _bandpass_taps(sample_rate: float) -> np.ndarray:
    nyq = 0.5 * sample_rate
    width = min(PASSBAND_HZ[0] - STOPBAND_HZ[0], STOPBAND_HZ[1] - PASSBAND_HZ[1])
    numtaps, beta = sps.kaiserord(STOP_ATTEN_DB, width / nyq)
    numtaps |= 1  # odd length: exactly compensable group delay
    edges = [0.5 * (STOPBAND_HZ[0] + PASSBAND_HZ[0]),
             0.5 * (PASSBAND_HZ[1] + STOPBAND_HZ[1])]
    return sps.firwin(numtaps, edges, window=("kaiser", beta),
                      pass_zero=False, fs=sample_rate)


def bandpass_5_40(x, sample_rate: float) -> np.ndarray:
    """Zero-phase 5-40 Hz bandpass (>=60 dB stop at 3.5/48 Hz, <=0.1 dB ripple)."""
    if sample_rate < 256.0:
        raise ValueError("sample_rate must be at least 256 Hz")
    x = np.asarray(x, dtype=float)
    taps = _bandpass_taps(sample_rate)
    if x.size < 3 * taps.size:
        raise LengthError(
            f"signal of {x.size} samples is shorter than 3x filter length {taps.size}")
    # centred convolution of a symmetric FIR: exact group-delay compensation
    return sps.fftconvolve(x, taps, mode="same")


# ---------------------------------------------------------------------------
# Epoching and evoked metrics
# ---------------------------------------------------------------------------


def epoch(recording: Recording, channel: str, data=None) -> EpochSet:
    """Fixed windows of -300..+800 ms about each trigger; partial windows dropped."""
    if recording.triggers.size == 0:
        raise NoTriggerError("recording has no triggers")
    x = recording.channel(channel) if data is None else np.asarray(data, dtype=float)
    fs = recording.sample_rate
    n_pre = int(round(EPOCH_PRE_S * fs))
    n_post = int(round(EPOCH_POST_S * fs))
    rows, dropped = [], 0
    for t in recording.triggers:
        i = int(round(t * fs))
        if i - n_pre < 0 or i + n_post > x.size:
            dropped += 1
            continue
        rows.append(x[i - n_pre:i + n_post])
    if not rows:
        raise NoTriggerError("no trigger has a full epoch window inside the recording")
    epochs = np.stack(rows)
    return EpochSet(epochs, np.ones(len(rows), dtype=bool), fs, n_pre, dropped)


def reject_artifacts(es: EpochSet) -> EpochSet:
    """Flag epochs whose in-window range exceeds 1 mV (strict inequality)."""
    rng = es.epochs.max(axis=1) - es.epochs.min(axis=1)
    kept = es.kept & ~(rng > ARTIFACT_RANGE_V)
    return EpochSet(es.epochs, kept, es.sample_rate, es.n_pre, es.dropped_triggers)


def sample_trials(es: EpochSet, n: int = 50, seed: int = 0) -> EpochSet:
    """Uniformly subsample kept epochs without replacement (all if fewer than n)."""
    kept_idx = np.flatnonzero(es.kept)
    if kept_idx.size > n:
        rng = np.random.default_rng(seed)
        chosen = np.sort(rng.choice(kept_idx, size=n, replace=False))
    else:
        chosen = kept_idx
    kept = np.zeros(es.epochs.shape[0], dtype=bool)
    kept[chosen] = True
    return EpochSet(es.epochs, kept, es.sample_rate, es.n_pre, es.dropped_triggers)


def vep_amplitude(es: EpochSet) -> float:
    """Peak-to-peak of the kept-epoch average over 0..800 ms, in microvolts."""
    if not es.kept.any():
        raise ValueError("no kept epochs")
    mean = es.kept_epochs.mean(axis=0)
    post = mean[es.n_pre:]
    return float((post.max() - post.min()) * 1e6)


def vep_snr(es: EpochSet) -> np.ndarray:
    """Per-trial SNR in dB: post-stimulus (0..300 ms) over pre-stimulus variance."""
    n_win = int(round(SNR_WINDOW_S * es.sample_rate))
    if es.n_pre < n_win or es.n_post < n_win:
        raise ValueError("epoch window does not cover +-300 ms about the trigger")
    kept = es.kept_epochs
    pre = kept[:, es.n_pre - n_win:es.n_pre]
    post = kept[:, es.n_pre:es.n_pre + n_win]
    var_pre = pre.var(axis=1, ddof=1)
    var_post = post.var(axis=1, ddof=1)
    if np.any(var_pre == 0.0):
        raise ZeroVarianceError("a pre-stimulus window has zero variance")
    return 10.0 * np.log10(var_post / var_pre)


def select_top_channels(channel_snrs: dict, k: int = 2) -> list:
    """Channels with the highest median per-trial SNR; ties keep input order."""
    names = list(channel_snrs)
    if len(names) < k:
        raise ValueError(f"need at least {k} channels")
    medians = {c: float(np.median(channel_snrs[c])) for c in names}
    order = sorted(range(len(names)), key=lambda i: (-medians[names[i]], i))
    return [names[i] for i in order[:k]]


# ---------------------------------------------------------------------------
# Spectra and bandwidth
# ---------------------------------------------------------------------------


def welch_psd(x, sample_rate: float) -> Psd:
    """Hamming-windowed averaged periodogram: 8 segments, 50% overlap, one-sided density."""
    x = np.asarray(x, dtype=float)
    if x.size < 2 * sample_rate:
        raise LengthError("need at least 2 s of data for a PSD estimate")
    nperseg = int(x.size // 4.5)
    f, p = sps.welch(x, fs=sample_rate, window="hamming", nperseg=nperseg,
                     noverlap=nperseg // 2, detrend=False, scaling="density",
                     return_onesided=True)
    return Psd(f, p)


NOISE_FLOOR_BAND = (400.0, 500.0)
MAINS_EXCLUSION_HZ = 10.0


def noise_floor(psd: Psd, mains_hz: float = 50.0) -> float:
    """Q3 + 1.5 IQR of power in the 400-500 Hz band, excluding +-10 Hz around
    mains harmonics."""
    lo, hi = NOISE_FLOOR_BAND
    if psd.frequencies[-1] < hi:
        raise BandError(f"PSD reaches {psd.frequencies[-1]:.1f} Hz < {hi:.0f} Hz")
    f = psd.frequencies
    keep = (f >= lo) & (f <= hi)
    k = int(np.floor((hi + MAINS_EXCLUSION_HZ) / mains_hz))
    for h in np.arange(1, k + 1) * mains_hz:
        keep &= ~(np.abs(f - h) < MAINS_EXCLUSION_HZ)
    vals = psd.power[keep]
    if vals.size == 0:
        raise BandError("no PSD samples left in the noise-floor band")
    q1, q3 = np.percentile(vals, [25.0, 75.0])
    return float(q3 + 1.5 * (q3 - q1))


BANDWIDTH_SCAN_HZ = (10.0, 400.0)
BANDWIDTH_BIN_HZ = 10.0


def max_bandwidth(psd: Psd, threshold: float) -> float:
    """Upper edge of the last 10 Hz bin before median power drops below the floor.

    Scans [10,20) .. [390,400); returns 400 if no bin drops and 10 if the
    first bin is already below.
    """
    lo, hi = BANDWIDTH_SCAN_HZ
    if psd.frequencies[-1] < hi:
        raise BandError(f"PSD reaches {psd.frequencies[-1]:.1f} Hz < {hi:.0f} Hz")
    f = psd.frequencies
    edges = np.arange(lo, hi + BANDWIDTH_BIN_HZ, BANDWIDTH_BIN_HZ)
    for lo_e, hi_e in zip(edges[:-1], edges[1:]):
        sel = (f >= lo_e) & (f < hi_e)
        if not sel.any():
            raise BandError(f"no PSD samples in bin [{lo_e:.0f},{hi_e:.0f}) Hz")
        if float(np.median(psd.power[sel])) < threshold:
            return float(lo_e)
    return float(hi)


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


def anova_oneway(groups: dict) -> dict:
    """One-way ANOVA over named groups (unbalanced sizes allowed)."""
    names = list(groups)
    data = [np.asarray(groups[g], dtype=float) for g in names]
    if len(data) < 2 or any(d.size < 2 for d in data):
        raise ValueError("need at least two groups with two samples each")
    n_total = sum(d.size for d in data)
    k = len(data)
    grand = sum(d.sum() for d in data) / n_total
    ss_between = sum(d.size * (d.mean() - grand) ** 2 for d in data)
    ss_within = sum(((d - d.mean()) ** 2).sum() for d in data)
    df_b, df_w = k - 1, n_total - k
    if ss_within == 0.0:
        # degenerate: identical values within groups
        if ss_between == 0.0:
            return {"F": 0.0, "df_between": df_b, "df_within": df_w, "p": 1.0}
        return {"F": math.inf, "df_between": df_b, "df_within": df_w, "p": 0.0}
    ms_b = ss_between / df_b
    ms_w = ss_within / df_w
    F = ms_b / ms_w
    p = float(scistats.f.sf(F, df_b, df_w))
    return {"F": float(F), "df_between": df_b, "df_within": df_w, "p": p}


def tukey_hsd(groups: dict, alpha: float = 0.01) -> list:
    """All-pairs Tukey HSD rows with the unbalanced-size (Tukey-Kramer) correction."""
    names = list(groups)
    data = {g: np.asarray(groups[g], dtype=float) for g in names}
    if len(names) < 2 or any(d.size < 2 for d in data.values()):
        raise ValueError("need at least two groups with two samples each")
    k = len(names)
    n_total = sum(d.size for d in data.values())
    df_w = n_total - k
    ms_w = sum(((d - d.mean()) ** 2).sum() for d in data.values()) / df_w
    rows = []
    for i in range(k):
        for j in range(i + 1, k):
            a, b = names[i], names[j]
            da, db = data[a], data[b]
            diff = float(da.mean() - db.mean())
            if ms_w == 0.0:
                p = 1.0 if diff == 0.0 else 0.0
            else:
                se = math.sqrt(0.5 * ms_w * (1.0 / da.size + 1.0 / db.size))
                q = abs(diff) / se
                p = float(scistats.studentized_range.sf(q, k, df_w))
            rows.append(TukeyRow(a, b, diff, p, p <= alpha))
    return rows


def compare_groups(groups: dict, alpha: float = 0.01) -> ComparisonReport:
    a = anova_oneway(groups)
    t = tukey_hsd(groups, alpha)
    return ComparisonReport(groups, a["F"], a["df_between"], a["df_within"],
                            a["p"], t, alpha)


# ---------------------------------------------------------------------------
# Channel pipeline
# ---------------------------------------------------------------------------


@dataclass
class ChannelVepResult:
    channel: str
    n_epochs: int
    n_kept: int
    n_used: int
    amplitude_uv: float
    snr_db: np.ndarray
    median_snr_db: float


def vep_pipeline(recording: Recording, channel: str, n_trials: int = 50,
                 seed: int = 0) -> ChannelVepResult:
    """Filter, epoch, reject, subsample, then amplitude and per-trial SNR."""
    filtered = bandpass_5_40(recording.channel(channel), recording.sample_rate)
    es = epoch(recording, channel, data=filtered)
    es = reject_artifacts(es)
    n_kept = int(es.kept.sum())
    if n_kept == 0:
        raise ValueError(f"{channel}: all epochs rejected")
    es = sample_trials(es, n=n_trials, seed=seed)
    snr = vep_snr(es)
    return ChannelVepResult(channel, es.epochs.shape[0], n_kept,
                            int(es.kept.sum()), vep_amplitude(es), snr,
                            float(np.median(snr)))
