"""Recording file format: one-line JSON header + float32 interleaved frames.

The header line carries format version, channel names, sample rate, and
units; the body is little-endian float32, channel-interleaved per frame.
Triggers live in a sidecar text file (one timestamp in seconds per line)
next to the recording, with the extension ``.trg``.  Storage is float32;
all computation stays float64.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .analysis import Recording

FORMAT_NAME = "headfield-recording"
FORMAT_VERSION = 1

_UNIT_SCALE = {"V": 1.0, "mV": 1e-3, "uV": 1e-6}


class FormatError(ValueError):
    def __init__(self, message, byte_offset=None):
        if byte_offset is not None:
            message = f"{message} (byte offset {byte_offset})"
        super().__init__(message)
        self.byte_offset = byte_offset


def trigger_path(path) -> Path:
    return Path(path).with_suffix(".trg")


def write_recording(path, channels, samples, sample_rate, units="V",
                    triggers=None) -> None:
    samples = np.atleast_2d(np.asarray(samples))
    if len(channels) != samples.shape[0]:
        raise ValueError("channel names do not match sample rows")
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "channels": list(channels),
        "sample_rate_hz": float(sample_rate),
        "units": units,
    }
    body = np.ascontiguousarray(samples.T, dtype="<f4")  # frame-major
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        f.write(body.tobytes())
    if triggers is not None:
        with open(trigger_path(path), "w") as f:
            for t in np.asarray(triggers, dtype=float):
                f.write(f"{t!r}\n")


def read_triggers(path) -> np.ndarray:
    out = []
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(float(line))
            except ValueError as exc:
                raise FormatError(f"{path}:{ln}: bad trigger timestamp {line!r}") from exc
    return np.asarray(out, dtype=float)


def read_recording(path, with_triggers=True) -> Recording:
    """Parse a recording file; any structural problem reports its byte offset."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError("missing header line terminator", byte_offset=len(raw))
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad header: {exc}", byte_offset=0) from exc
    if header.get("format") != FORMAT_NAME:
        raise FormatError(f"not a {FORMAT_NAME} file", byte_offset=0)
    channels = header.get("channels")
    fs = header.get("sample_rate_hz", 0)
    units = header.get("units", "V")
    if not channels or not isinstance(channels, list):
        raise FormatError("header lacks channel names", byte_offset=0)
    if not fs or fs <= 0:
        raise FormatError("header sample_rate_hz must be positive", byte_offset=0)
    if units not in _UNIT_SCALE:
        raise FormatError(f"unsupported units {units!r}", byte_offset=0)
    body = raw[nl + 1:]
    frame_bytes = 4 * len(channels)
    if len(body) % frame_bytes != 0:
        good = len(body) - (len(body) % frame_bytes)
        raise FormatError(
            f"body size {len(body)} is not a whole number of {frame_bytes}-byte frames",
            byte_offset=nl + 1 + good)
    data = np.frombuffer(body, dtype="<f4").reshape(-1, len(channels)).T
    samples = data.astype(np.float64) * _UNIT_SCALE[units]
    triggers = np.empty(0)
    tp = trigger_path(path)
    if with_triggers and tp.exists():
        triggers = read_triggers(tp)
    return Recording(list(channels), samples, float(fs), triggers)
