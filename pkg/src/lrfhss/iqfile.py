"""IQ capture files: interleaved float32 I/Q plus a JSON sidecar.

`foo.iq` holds [I0, Q0, I1, Q1, ...] as little-endian float32;
`foo.iq.json` records the sample rate and free-form metadata so captures
are self-describing across CLI stages.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

SIDECAR_SUFFIX = ".json"
FORMAT_NAME = "cf32le"


def sidecar_path(path) -> Path:
    return Path(str(path) + SIDECAR_SUFFIX)


def write_iq(path, samples: np.ndarray, sample_rate_hz: float,
             meta: dict | None = None) -> Path:
    """Write complex samples and their sidecar; returns the data path."""
    path = Path(path)
    samples = np.asarray(samples)
    if samples.ndim != 1:
        raise ValueError("IQ files hold one stream (1-D array)")
    inter = np.empty(samples.size * 2, dtype="<f4")
    inter[0::2] = samples.real.astype(np.float32)
    inter[1::2] = samples.imag.astype(np.float32)
    path.write_bytes(inter.tobytes())
    doc = {
        "format": FORMAT_NAME,
        "sample_rate_hz": float(sample_rate_hz),
        "n_samples": int(samples.size),
    }
    if meta:
        doc["meta"] = meta
    sidecar_path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def read_iq(path) -> tuple[np.ndarray, dict]:
    """Read an IQ file; returns (complex128 samples, sidecar dict).

    A missing sidecar is tolerated (raw captures); the returned dict is
    then empty and the caller must know the rate.
    """
    path = Path(path)
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size % 2:
        raise ValueError(f"{path}: odd float count, not interleaved I/Q")
    samples = raw[0::2].astype(np.float64) + 1j * raw[1::2].astype(np.float64)
    side = sidecar_path(path)
    doc: dict = {}
    if side.exists():
        doc = json.loads(side.read_text())
        n = doc.get("n_samples")
        if n is not None and n != samples.size:
            raise ValueError(
                f"{path}: sidecar says {n} samples, file has {samples.size}")
    return samples, doc


def sample_rate_of(doc: dict, fallback: float | None = None) -> float:
    rate = doc.get("sample_rate_hz", fallback)
    if rate is None:
        raise ValueError("sample rate unknown: no sidecar and no --rate")
    return float(rate)
