"""LEO link impairments: Doppler drift, symbol-timing offset, AWGN.

The Doppler model is a linear frequency ramp produced by two cascaded
accumulators (frequency, then phase), so the instantaneous frequency at
sample m is `initial_cfo + rate * t_m`; the multiplication by a unit
phasor preserves every sample's magnitude exactly.

The timing offset is an integer sample delay at 8 samples/symbol, i.e.
eighths of a symbol.  Downstream 2-samples/symbol processing then sees
a genuinely fractional offset, which is the effect under study.

Noise is calibrated against the 488.28125 Hz symbol-rate band: at
`osf` samples per symbol the stream bandwidth is `osf` times the symbol
rate, so a per-sample noise variance of `osf * P / snr` puts the
in-band SNR at exactly `snr` for signal power P.  The configured order
of operations is Doppler, then timing, then noise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .profiles import SYMBOL_RATE_BAUD

#: Oversampling factor at which timing shifts are defined.
TIMING_OSF = 8
TIMING_STEPS = 8          # one symbol == 8 eighths


class UnsupportedRate(ValueError):
    """Operation requires a specific oversampling factor."""


@dataclass(frozen=True)
class ChannelConfig:
    """One channel realization; `snr_db=inf` disables the noise stage."""

    snr_db: float = math.inf
    doppler_rate: float = 0.0            # Hz/s
    initial_cfo_hz: float = 0.0
    timing_offset_eighths: int = 0       # integer, 1/8-symbol units
    rng_seed: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.snr_db) or self.snr_db == math.inf):
            raise ValueError("snr_db must be finite or +inf")
        if not math.isfinite(self.doppler_rate):
            raise ValueError("doppler_rate must be finite")
        if not 0 <= self.timing_offset_eighths < TIMING_STEPS:
            raise ValueError(
                f"timing offset {self.timing_offset_eighths} outside "
                f"0..{TIMING_STEPS - 1} eighths")
        if not 0 <= self.rng_seed < (1 << 64):
            raise ValueError("rng_seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return {
            "snr_db": None if self.snr_db == math.inf else self.snr_db,
            "doppler_rate": self.doppler_rate,
            "initial_cfo_hz": self.initial_cfo_hz,
            "timing_offset_eighths": self.timing_offset_eighths,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelConfig":
        snr = d.get("snr_db", None)
        return cls(
            snr_db=math.inf if snr is None else float(snr),
            doppler_rate=float(d.get("doppler_rate", 0.0)),
            initial_cfo_hz=float(d.get("initial_cfo_hz", 0.0)),
            timing_offset_eighths=int(d.get("timing_offset_eighths", 0)),
            rng_seed=int(d.get("rng_seed", 0)),
        )


# ---------------------------------------------------------------------------
# Doppler
# ---------------------------------------------------------------------------

def doppler_phase(n: int, fs_hz: float, rate_hz_s: float, cfo_hz: float,
                  start_sample: int = 0) -> np.ndarray:
    """Phase sequence of the two-accumulator frequency ramp (radians).

    Sample m (absolute index `start_sample + m`) carries the phase sum
    of a frequency accumulator stepping by rate/fs and a phase
    accumulator stepping by 2*pi*f/fs, evaluated in closed form:
    both accumulators are plain sums, so their composition telescopes
    to 2*pi*(cfo*k + rate*k*(k+1)/(2*fs))/fs at step k.
    """
    k = start_sample + 1.0 + np.arange(n, dtype=np.float64)
    return 2.0 * np.pi * (cfo_hz * k + rate_hz_s * k * (k + 1.0)
                          / (2.0 * fs_hz)) / fs_hz


def apply_doppler(samples: np.ndarray, fs_hz: float, rate_hz_s: float,
                  cfo_hz: float, start_sample: int = 0) -> np.ndarray:
    """Impose a linear carrier ramp: f(t) = cfo + rate*t, norm-preserving.

    `start_sample` places the block on an absolute sample timeline so a
    packet's hops can be impaired block by block consistently.
    """
    samples = np.asarray(samples)
    if rate_hz_s == 0.0 and cfo_hz == 0.0:
        return samples
    ph = doppler_phase(samples.shape[-1], fs_hz, rate_hz_s, cfo_hz,
                       start_sample)
    return samples * np.exp(1j * ph)


# ---------------------------------------------------------------------------
# Timing offset
# ---------------------------------------------------------------------------

def apply_timing_offset(samples: np.ndarray, k_eighths: int,
                        osf: int = TIMING_OSF) -> np.ndarray:
    """Delay a stream by k/8 symbol via an integer sample shift.

    Only defined at 8 samples/symbol, where one eighth is one sample;
    the stream keeps its length (zeros shift in, the tail falls off),
    so applying k then k' equals applying k + k'.
    """
    if osf != TIMING_OSF:
        raise UnsupportedRate(
            f"timing offsets are defined at {TIMING_OSF} samples/symbol, "
            f"got {osf}")
    if k_eighths < 0:
        raise ValueError("timing offset must be non-negative")
    samples = np.asarray(samples)
    if k_eighths == 0:
        return samples
    out = np.zeros_like(samples)
    out[..., k_eighths:] = samples[..., :samples.shape[-1] - k_eighths]
    return out


# ---------------------------------------------------------------------------
# Noise
# ---------------------------------------------------------------------------

def noise_sigma2(snr_db: float, osf: float, signal_power: float = 1.0) -> float:
    """Per-sample complex noise variance for a target in-band SNR."""
    if snr_db == math.inf:
        return 0.0
    return signal_power * osf / (10.0 ** (snr_db / 10.0))


def complex_awgn(shape, sigma2: float, rng: np.random.Generator) -> np.ndarray:
    """Circular complex Gaussian noise with E[|n|^2] = sigma2."""
    scale = math.sqrt(sigma2 / 2.0)
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * scale


def occupied_power(samples: np.ndarray) -> float:
    """Mean |s|^2 over the nonzero (occupied) samples."""
    samples = np.asarray(samples)
    p = np.square(np.abs(samples))
    occ = p > 0
    n = np.count_nonzero(occ)
    return float(np.sum(p[occ]) / n) if n else 0.0


def add_awgn(samples: np.ndarray, snr_db: float, osf: float,
             rng: np.random.Generator | int | None = None,
             signal_power: float | None = None) -> np.ndarray:
    """Add calibrated noise; identity at snr_db = +inf.

    The SNR is referenced to the symbol-rate bandwidth (488.28125 Hz):
    noise power inside that band equals signal power minus snr_db.  By
    default the signal power is measured over the occupied samples.
    Deterministic for a given seed or Generator state.
    """
    samples = np.asarray(samples)
    if snr_db == math.inf:
        return samples
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if signal_power is None:
        signal_power = occupied_power(samples)
    sigma2 = noise_sigma2(snr_db, osf, signal_power)
    return samples + complex_awgn(samples.shape, sigma2, rng)


# ---------------------------------------------------------------------------
# Composite
# ---------------------------------------------------------------------------

def apply_channel(samples: np.ndarray, cfg: ChannelConfig, osf: int,
                  rng: np.random.Generator | None = None,
                  start_sample: int = 0,
                  signal_power: float | None = None) -> np.ndarray:
    """Doppler, then timing shift, then noise, in that fixed order.

    `osf` is the stream's samples-per-symbol count (fs = osf * 488.28125).
    A nonzero timing offset requires osf == 8; the Doppler timeline can
    be offset via `start_sample` for block-wise application.
    """
    fs = osf * SYMBOL_RATE_BAUD
    out = apply_doppler(samples, fs, cfg.doppler_rate, cfg.initial_cfo_hz,
                        start_sample)
    if cfg.timing_offset_eighths:
        out = apply_timing_offset(out, cfg.timing_offset_eighths, osf)
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    return add_awgn(out, cfg.snr_db, osf, rng, signal_power)
